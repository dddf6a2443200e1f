import numpy as np
import pytest

from tvseg import autodiff as ad
from tvseg.autodiff import Tensor, finite_diff_check
from tvseg.decoder import (CatLevelParams, FeaturePyramid, LgffLevelParams, binarize, cat_fuse, decode_pyramid,
                           lgff_fuse, segmentation_head)
from tvseg.errors import DimensionError
from tvseg.nn import Conv, ParamStore, coordinate_features

C = 4


def level(seed, c_a=3, c_m=2, motion=True):
    store = ParamStore(seed)
    p = LgffLevelParams.create(store, f"l{seed}", c_a, c_m if motion else None, C)
    rng = np.random.default_rng(seed + 500)
    for t in store:
        t.data = t.data + 0.2 * rng.normal(size=t.shape)
    return store, p


def inputs(seed, t=2, h=4, c_a=3, c_m=2):
    rng = np.random.default_rng(seed)
    return (Tensor(rng.normal(size=(t, c_a, h, h))), Tensor(rng.normal(size=(t, c_m, h, h))),
            Tensor(rng.normal(size=(t, C, h // 2, h // 2))), Tensor(rng.normal(size=C)))


def test_zero_cls_zeroes_streams():
    _, p = level(0)
    f_a, f_m, prev, _ = inputs(0)
    out = lgff_fuse(f_a, f_m, prev, Tensor(np.zeros(C)), p)
    for k in ("f_ea", "f_em", "g_ea", "g_em"):
        assert np.array_equal(out[k].data, np.zeros_like(out[k].data))
    want = 1 / (1 + np.exp(-p.att_a.b.data[0]))
    assert np.allclose(out["att_a"].data, want, rtol=0, atol=1e-15)


def test_zero_attention_conv_gives_one_and_a_half():
    _, p = level(1)
    for conv in (p.att_a, p.att_m):
        conv.w.data[:] = 0
        conv.b.data[:] = 0
    out = lgff_fuse(*inputs(1), p)
    assert np.all(out["att_a"].data == 0.5) and np.all(out["att_m"].data == 0.5)
    assert np.array_equal(out["g_ea"].data, 1.5 * out["f_ea"].data)
    assert np.array_equal(out["g_em"].data, 1.5 * out["f_em"].data)


@pytest.mark.parametrize("bias,factor", [(-800.0, 1.0), (800.0, 2.0)])
def test_residual_extremes(bias, factor):
    _, p = level(2)
    for conv in (p.att_a, p.att_m):
        conv.w.data[:] = 0
        conv.b.data[:] = bias
    out = lgff_fuse(*inputs(2), p)
    assert np.array_equal(out["g_ea"].data, factor * out["f_ea"].data)
    assert np.array_equal(out["g_em"].data, factor * out["f_em"].data)


def test_both_attention_maps_come_from_appearance():
    _, p = level(3)
    f_a, f_m, prev, cls = inputs(3)
    out = lgff_fuse(f_a, f_m, prev, cls, p)
    want = ad.sigmoid(ad.conv2d(out["f_ea"], p.att_m.w, p.att_m.b)).data
    assert np.array_equal(out["att_m"].data, want)
    assert not np.allclose(out["att_a"].data, out["att_m"].data)


@pytest.mark.parametrize("alpha", [0.5, 2.0, 7.25])
def test_cls_scaling_covariance(alpha):
    _, p = level(4)
    f_a, f_m, prev, cls = inputs(4)
    base = lgff_fuse(f_a, f_m, prev, cls, p)
    scaled = lgff_fuse(f_a, f_m, prev, Tensor(alpha * cls.data), p)
    for k in ("f_ea", "f_em"):
        assert np.max(np.abs(scaled[k].data - alpha * base[k].data)) <= 1e-12 * max(1, np.abs(base[k].data).max() * alpha)


def test_attention_in_open_unit_interval():
    _, p = level(5)
    out = lgff_fuse(*inputs(5), p)
    for k in ("att_a", "att_m"):
        assert np.all(out[k].data > 0) and np.all(out[k].data < 1)


def test_matches_step_by_step_composition():
    _, p = level(6)
    f_a, f_m, prev, cls = inputs(6)
    t = f_a.shape[0]
    pc = np.broadcast_to(coordinate_features(4, 4).data, (t, 8, 4, 4))
    up = ad.bilinear_upsample(prev, 2).data

    def conv(x, c):
        return ad.conv2d(Tensor(x), c.w, c.b, c.stride, c.dilation, c.padding).data

    sig = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
    f_ea = conv(np.concatenate([pc, up, conv(f_a.data, p.red_a)], 1), p.fuse_a) * cls.data[None, :, None, None]
    f_em = conv(np.concatenate([pc, up, conv(f_m.data, p.red_m)], 1), p.fuse_m) * cls.data[None, :, None, None]
    g_ea = sig(conv(f_ea, p.att_a)) * f_ea + f_ea
    g_em = sig(conv(f_ea, p.att_m)) * f_em + f_em
    f = np.maximum(conv(np.maximum(conv(np.concatenate([g_ea, g_em], 1), p.out1), 0), p.out2), 0)
    out = lgff_fuse(f_a, f_m, prev, cls, p)
    assert np.max(np.abs(out["f"].data - f)) <= 1e-12
    assert np.max(np.abs(out["g_em"].data - g_em)) <= 1e-12


def test_spatial_mismatch():
    _, p = level(7)
    f_a, f_m, prev, cls = inputs(7)
    with pytest.raises(DimensionError):
        lgff_fuse(f_a, Tensor(np.ones((2, 2, 2, 2))), prev, cls, p)
    with pytest.raises(DimensionError):
        lgff_fuse(f_a, f_m, Tensor(np.ones((2, C, 3, 3))), cls, p)


def pyramid(rng, t=1, size=8, widths=(3, 3, 2, 2)):
    sizes = (size, size // 2, size // 4, size // 4)
    return FeaturePyramid([Tensor(rng.normal(size=(t, w, s, s))) for w, s in zip(widths, sizes)])


def test_pyramid_ratio_check():
    with pytest.raises(DimensionError):
        FeaturePyramid([Tensor(np.ones((1, 1, s, s))) for s in (8, 4, 4, 2)])


def test_decode_pyramid_trace_and_shape():
    rng = np.random.default_rng(8)
    store = ParamStore(8)
    levels = [LgffLevelParams.create(store, f"l{i}", w, w, C) for i, w in enumerate((3, 3, 2))]
    app, mot = pyramid(rng), pyramid(rng)
    f1, trace = decode_pyramid(app, mot, Tensor(rng.normal(size=(1, C, 2, 2))), Tensor(rng.normal(size=C)), levels)
    assert f1.shape == (1, C, 8, 8)
    assert sorted(trace.f_ea) == sorted(trace.f_em) == [1, 2, 3]
    for lv, s in ((1, 8), (2, 4), (3, 2)):
        assert trace.f_ea[lv].shape == trace.g_em[lv].shape == trace.f[lv].shape == (1, C, s, s)


def test_cat_decoder_shares_output_shape():
    rng = np.random.default_rng(9)
    store = ParamStore(9)
    lg = [LgffLevelParams.create(store, f"l{i}", w, w, C) for i, w in enumerate((3, 3, 2))]
    ct = [CatLevelParams.create(store, f"c{i}", w, w, C, True) for i, w in enumerate((3, 3, 2))]
    app, mot = pyramid(rng), pyramid(rng)
    top, cls = Tensor(rng.normal(size=(1, C, 2, 2))), Tensor(rng.normal(size=C))
    assert decode_pyramid(app, mot, top, cls, lg)[0].shape == decode_pyramid(app, mot, top, cls, ct)[0].shape


def test_cat_level_appearance_only():
    rng = np.random.default_rng(10)
    store = ParamStore(10)
    p = CatLevelParams.create(store, "c", 3, None, C, False)
    out = cat_fuse(Tensor(rng.normal(size=(2, 3, 4, 4))), None, Tensor(rng.normal(size=(2, C, 2, 2))), Tensor(np.ones(C)), p)
    assert out.shape == (2, C, 4, 4) and np.all(out.data >= 0)


def test_decode_gradient_reaches_level3_reduction():
    rng = np.random.default_rng(11)
    store = ParamStore(11)
    levels = [LgffLevelParams.create(store, f"l{i}", w, w, C) for i, w in enumerate((3, 3, 2))]
    for t in store:
        t.data = t.data + 0.2 * rng.normal(size=t.shape)
    app, mot = pyramid(rng), pyramid(rng)
    top, cls = Tensor(rng.normal(size=(1, C, 2, 2))), Tensor(rng.normal(size=C))
    r = rng.normal(size=(1, C, 8, 8))
    w3 = store.tensors["l2.red_a.w"]
    rep = finite_diff_check(lambda: ad.tsum(decode_pyramid(app, mot, top, cls, levels)[0] * Tensor(r)), {"red3": w3},
                            h_rel=1e-6)
    assert rep.passed and np.any(w3.grad != 0)


def test_f1_end_to_end_gradcheck():
    rng = np.random.default_rng(12)
    store = ParamStore(12)
    levels = [LgffLevelParams.create(store, f"l{i}", w, w, C) for i, w in enumerate((3, 3, 2))]
    for t in store:
        t.data = t.data + 0.2 * rng.normal(size=t.shape)
    app, mot = pyramid(rng), pyramid(rng)
    top, cls = ad.parameter(rng.normal(size=(1, C, 2, 2))), ad.parameter(rng.normal(size=C))
    r = rng.normal(size=(1, C, 8, 8))
    rep = finite_diff_check(lambda: ad.tsum(decode_pyramid(app, mot, top, cls, levels)[0] * Tensor(r)),
                            {"top": top, "cls": cls, **store.tensors}, h_rel=1e-6)
    assert rep.passed, rep.worst


def test_head_zero_weights_and_saturation():
    store = ParamStore(0)
    head = Conv.create(store, "h", C, 1, k=1)
    head.w.data[:] = 0
    f1 = Tensor(np.random.default_rng(0).normal(size=(2, C, 4, 4)))
    logits, probs = segmentation_head(f1, head, 4)
    assert logits.shape == (2, 1, 4, 4) and probs.shape == (2, 1, 16, 16)
    assert np.all(probs.data == 0.5) and np.all(binarize(probs))
    head.b.data[:] = 1e3
    assert np.all(binarize(segmentation_head(f1, head, 4)[1]))


def test_head_matches_composition():
    store = ParamStore(1)
    head = Conv.create(store, "h", C, 1, k=1)
    f1 = Tensor(np.random.default_rng(1).normal(size=(1, C, 3, 3)))
    logits, probs = segmentation_head(f1, head, 2)
    want = ad.bilinear_upsample(Tensor(1 / (1 + np.exp(-logits.data))), 2).data
    assert np.max(np.abs(probs.data - want)) <= 1e-12
