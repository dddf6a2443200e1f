import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tvseg.errors import DimensionError, UsageError
from tvseg.metrics import (MAP_THRESHOLDS, P_THRESHOLDS, MetricsReport, frame_counts, iou, map_50_95, mean_iou,
                           overall_iou, parse_report, precision_at)

ious_strategy = st.lists(st.floats(0.0, 1.0), min_size=1, max_size=30)


def test_iou_examples():
    a = np.zeros((4, 4), bool)
    b = np.zeros((4, 4), bool)
    assert iou(a, b) == 1.0
    a[:2] = True
    assert iou(a, b) == 0.0
    b[1:3] = True
    assert iou(a, b) == 4 / 12
    assert frame_counts(a, b) == (4, 12)
    with pytest.raises(DimensionError):
        iou(a, np.zeros((4, 5), bool))


def test_overall_differs_from_mean():
    counts = [(1, 2), (9, 10)]
    assert overall_iou(counts) == 10 / 12
    assert mean_iou([0.5, 0.9]) == 0.7


def test_map_example_is_exact():
    assert map_50_95([0.9, 0.6, 0.4]) == 0.4
    assert MAP_THRESHOLDS[0] == 0.5 and MAP_THRESHOLDS[-1] == 0.95 and len(MAP_THRESHOLDS) == 10


def test_map_matches_naive_oracle():
    for seed in range(100):
        ious = np.random.default_rng(seed).random(7)
        naive = sum(sum(1 for v in ious if v >= 0.5 + 0.05 * k - 1e-12) / 7 for k in range(10)) / 10
        assert abs(map_50_95(ious) - naive) <= 1e-12


def test_precision_ties_pass():
    assert precision_at([0.5, 0.49], 0.5) == 0.5


def test_empty_inputs():
    for f in (mean_iou, map_50_95, lambda x: precision_at(x, 0.5), overall_iou):
        with pytest.raises(UsageError):
            f([])


@settings(max_examples=200, deadline=None)
@given(ious_strategy)
def test_precision_monotone_and_map_bounds(ious):
    ps = [precision_at(ious, t) for t in P_THRESHOLDS]
    assert all(a >= b for a, b in zip(ps, ps[1:]))
    m = map_50_95(ious)
    assert precision_at(ious, 0.95) <= m <= precision_at(ious, 0.5)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_single_frame_overall_equals_mean(seed, size):
    rng = np.random.default_rng(seed)
    p, g = rng.random((size, size)) < 0.5, rng.random((size, size)) < 0.5
    r = MetricsReport.from_counts([frame_counts(p, g)])
    assert 0 <= r.overall_iou <= 1
    assert r.overall_iou == r.mean_iou == iou(p, g)


def test_report_render_and_parse():
    r = MetricsReport.from_counts([(3, 4), (1, 3), (0, 0)])
    text = r.render()
    parsed = parse_report(text)
    assert parsed == r.as_dict()
    assert parsed["count"] == 3 and parsed["p@0.5"] == 2 / 3
    table = text.split("\n\n")[0].splitlines()
    assert table[0].startswith("metric") and len({line.index(line.split()[-1]) for line in table[2:]}) == 1
