"""Segmentation metrics: IoU variants, precision at thresholds and threshold-averaged mAP."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, UsageError

P_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)
MAP_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


def frame_counts(pred: np.ndarray, gt: np.ndarray) -> tuple:
    """(intersection, union) pixel counts of two boolean masks."""
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return int(np.count_nonzero(pred & gt)), int(np.count_nonzero(pred | gt))


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """|pred & gt| / |pred | gt|; two empty masks agree perfectly."""
    inter, union = frame_counts(pred, gt)
    return 1.0 if union == 0 else inter / union


def _nonempty(values, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise UsageError(f"{what} needs at least one sample")
    return arr


def overall_iou(counts) -> float:
    """Summed intersections over summed unions for ``[(I, U), ...]``."""
    arr = _nonempty(counts, "overall_iou").reshape(-1, 2)
    inter, union = arr.sum(axis=0)
    return 1.0 if union == 0 else float(inter / union)


def mean_iou(ious) -> float:
    return float(_nonempty(ious, "mean_iou").mean())


def precision_at(ious, tau: float) -> float:
    """Fraction of IoUs at or above `tau` (ties pass)."""
    arr = _nonempty(ious, "precision_at")
    return float(np.count_nonzero(arr >= tau) / arr.size)


def map_50_95(ious) -> float:
    """Mean of ``precision_at`` over the ten thresholds 0.50, 0.55, ..., 0.95."""
    arr = _nonempty(ious, "map_50_95")
    passes = sum(int(np.count_nonzero(arr >= t)) for t in MAP_THRESHOLDS)
    return passes / (arr.size * len(MAP_THRESHOLDS))


@dataclass
class MetricsReport:
    overall_iou: float
    mean_iou: float
    p_at: dict = field(default_factory=dict)
    map_50_95: float = 0.0
    count: int = 0

    @classmethod
    def from_counts(cls, counts) -> "MetricsReport":
        counts = [tuple(c) for c in counts]
        ious = [1.0 if u == 0 else i / u for i, u in counts]
        return cls(
            overall_iou=overall_iou(counts),
            mean_iou=mean_iou(ious),
            p_at={t: precision_at(ious, t) for t in P_THRESHOLDS},
            map_50_95=map_50_95(ious),
            count=len(counts),
        )

    def as_dict(self) -> dict:
        out = {"overall_iou": self.overall_iou, "mean_iou": self.mean_iou}
        out.update({f"p@{t:.1f}": v for t, v in sorted(self.p_at.items())})
        out["map_50_95"] = self.map_50_95
        out["count"] = self.count
        return out

    def table(self) -> str:
        rows = [(k, str(v) if isinstance(v, int) else f"{v:.4f}") for k, v in self.as_dict().items()]
        width = max(len(k) for k, _ in rows)
        lines = [f"{'metric':<{width}}  value", f"{'-' * width}  ------"]
        lines += [f"{k:<{width}}  {v}" for k, v in rows]
        return "\n".join(lines)

    def key_values(self) -> str:
        return "\n".join(f"{k} = {v!r}" for k, v in self.as_dict().items())

    def render(self) -> str:
        """Human table followed by machine-readable ``key = value`` lines."""
        return self.table() + "\n\n" + self.key_values() + "\n"


def parse_report(text: str) -> dict:
    """Read back the ``key = value`` lines of a rendered report."""
    out = {}
    for line in text.splitlines():
        if " = " not in line:
            continue
        k, v = line.split(" = ", 1)
        out[k.strip()] = int(v) if k.strip() == "count" else float(v)
    return out
