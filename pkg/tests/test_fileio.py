import numpy as np
import pytest

from tvseg.errors import ConfigError
from tvseg.fileio import (FormatError, load_checkpoint, read_dataset, read_flo, read_pgm, read_ppm, save_checkpoint,
                          write_dataset, write_flo, write_pgm, write_ppm)
from tvseg.world import make_dataset


@pytest.fixture(scope="module")
def clips():
    return make_dataset("motion-necessity", 3, 5, 32, 32)


def round_trip(tmp_path, write, read, value, name):
    a, b = tmp_path / f"a_{name}", tmp_path / f"b_{name}"
    write(a, value)
    write(b, read(a))
    assert a.read_bytes() == b.read_bytes()
    return read(a)


def test_ppm_round_trip(tmp_path, clips):
    img = round_trip(tmp_path, write_ppm, read_ppm, clips[0].frames[1], "ppm")
    assert np.array_equal(img, clips[0].frames[1])


def test_pgm_round_trip(tmp_path, clips):
    mask = round_trip(tmp_path, write_pgm, read_pgm, clips[0].gt_masks[0], "pgm")
    assert np.array_equal(mask, clips[0].gt_masks[0])


def test_flo_round_trip(tmp_path, clips):
    flow = round_trip(tmp_path, write_flo, read_flo, clips[0].flows[2], "flo")
    assert np.array_equal(flow, clips[0].flows[2])
    frac = np.random.default_rng(0).normal(size=(2, 5, 7))
    back = round_trip(tmp_path, write_flo, read_flo, frac, "flo2")
    assert np.array_equal(back, frac.astype(np.float32).astype(np.float64))


def test_flo_layout(tmp_path):
    flow = np.zeros((2, 2, 3))
    flow[0, 1, 2], flow[1, 1, 2] = 1.5, -2.0
    write_flo(tmp_path / "x.flo", flow)
    raw = (tmp_path / "x.flo").read_bytes()
    assert raw[:4] == b"PIEH" and np.frombuffer(raw[4:12], "<i4").tolist() == [3, 2]
    assert np.frombuffer(raw[12:], "<f4")[-2:].tolist() == [1.5, -2.0]


def test_bad_magic(tmp_path):
    (tmp_path / "x.flo").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(FormatError):
        read_flo(tmp_path / "x.flo")
    (tmp_path / "x.ppm").write_bytes(b"P5\n1 1\n255\n\x00")
    with pytest.raises(FormatError):
        read_ppm(tmp_path / "x.ppm")
    (tmp_path / "x.ckpt").write_bytes(b"garbage!")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_truncated_flo(tmp_path):
    write_flo(tmp_path / "x.flo", np.ones((2, 3, 3)))
    (tmp_path / "y.flo").write_bytes((tmp_path / "x.flo").read_bytes()[:-4])
    with pytest.raises(FormatError):
        read_flo(tmp_path / "y.flo")


def test_netpbm_comments(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# comment\n2 1\n255\n\x00\xff")
    assert read_pgm(tmp_path / "c.pgm").tolist() == [[False, True]]


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.w": rng.normal(size=(3, 4)), "b": np.array(2.5), "c.k": rng.normal(size=(2, 1, 3, 3))}
    meta = {"seed": "3", "ablation": "B+M"}
    save_checkpoint(tmp_path / "a.ckpt", tensors, meta)
    got, got_meta = load_checkpoint(tmp_path / "a.ckpt")
    assert got_meta == meta and list(got) == list(tensors)
    for k in tensors:
        assert got[k].shape == tensors[k].shape and np.array_equal(got[k], tensors[k])
    save_checkpoint(tmp_path / "b.ckpt", got, got_meta)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_trailing_bytes(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", {"x": np.ones(2)}, {})
    (tmp_path / "b.ckpt").write_bytes((tmp_path / "a.ckpt").read_bytes() + b"\0")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "b.ckpt")


def test_dataset_round_trip(tmp_path, clips):
    write_dataset(tmp_path / "d1", clips)
    back = read_dataset(tmp_path / "d1")
    assert [c.name for c in back] == [c.name for c in clips]
    for a, b in zip(clips, back):
        assert np.array_equal(a.frames, b.frames) and np.array_equal(a.flows, b.flows)
        assert np.array_equal(a.gt_masks, b.gt_masks) and a.token_ids == b.token_ids
    write_dataset(tmp_path / "d2", back)
    for f in sorted((tmp_path / "d1").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "d2" / f.relative_to(tmp_path / "d1")).read_bytes()


def test_dataset_vocab_mismatch_and_missing_manifest(tmp_path, clips):
    write_dataset(tmp_path / "d", clips[:1])
    (tmp_path / "d" / "vocab.txt").write_text("0 [PAD]\n", encoding="utf-8")
    with pytest.raises(FormatError):
        read_dataset(tmp_path / "d")
    with pytest.raises(ConfigError):
        read_dataset(tmp_path / "missing")


def test_dataset_unknown_word(tmp_path, clips):
    write_dataset(tmp_path / "d", clips[:1])
    (tmp_path / "d" / clips[0].name / "text.txt").write_text("the purple disk\n", encoding="utf-8")
    with pytest.raises(FormatError):
        read_dataset(tmp_path / "d")
