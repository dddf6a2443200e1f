import numpy as np
import pytest

from tvseg import autodiff as ad
from tvseg.autodiff import Tensor, finite_diff_check
from tvseg.errors import DimensionError
from tvseg.mmvt import (ModalTokenBundle, MmvtParams, assemble_tokens, chunk_tokens, cross_modal_attention,
                        map_to_tokens, mmvt_forward, mmvt_layer, temporal_attention, tokens_to_map)
from tvseg.nn import ParamStore, mlp_block, msa


def bundle(rng, t=3, hw=16, l=20, c=8, motion=True):
    return ModalTokenBundle(Tensor(rng.normal(size=(t, hw, c))), Tensor(rng.normal(size=(t, hw, c))) if motion else None,
                            Tensor(rng.normal(size=(l, c))))


def random_params(seed, c=8, heads=2, layers=1, **kw):
    store = ParamStore(seed)
    p = MmvtParams.create(store, "mmvt", c, heads, layers, 2, **kw)
    rng = np.random.default_rng(seed + 1000)
    for t in store:
        t.data = t.data + 0.3 * rng.normal(size=t.shape)
    return store, p


def zero_params(c=8, layers=2):
    store = ParamStore(0)
    p = MmvtParams.create(store, "mmvt", c, 2, layers, 2)
    for t in store:
        t.data = np.zeros(t.shape)
    return p


def test_assemble_shape_and_broadcast():
    b = bundle(np.random.default_rng(0), 3, 16, 20, 64)
    z = assemble_tokens(b)
    assert z.shape == (3, 52, 64)
    assert np.array_equal(z.data[0, 32:], z.data[2, 32:])


def test_assemble_chunk_round_trip():
    b = bundle(np.random.default_rng(1))
    za, zm, zl = chunk_tokens(assemble_tokens(b), b.hw)
    assert np.array_equal(za.data, b.z_a.data) and np.array_equal(zm.data, b.z_m.data)
    for t in range(3):
        assert np.array_equal(zl.data[t], b.z_l.data)


def test_assemble_without_motion_round_trip():
    b = bundle(np.random.default_rng(2), motion=False)
    za, zm, zl = chunk_tokens(assemble_tokens(b), b.hw, motion=False)
    assert zm is None and np.array_equal(za.data, b.z_a.data) and np.array_equal(zl.data[1], b.z_l.data)


def test_bundle_channel_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(DimensionError):
        ModalTokenBundle(Tensor(rng.normal(size=(2, 4, 8))), Tensor(rng.normal(size=(2, 4, 8))), Tensor(np.ones((3, 6))))


def test_cma_zero_weights_is_identity_and_per_frame():
    p = zero_params().layers[0]
    z = assemble_tokens(bundle(np.random.default_rng(3)))
    assert np.array_equal(cross_modal_attention(z, p.cma_ln, p.cma).data, z.data)
    _, rp = random_params(3)
    lay = rp.layers[0]
    same = np.repeat(np.random.default_rng(4).normal(size=(1, 9, 8)), 2, axis=0)
    out = cross_modal_attention(Tensor(same), lay.cma_ln, lay.cma).data
    assert np.array_equal(out[0], out[1])


def test_cma_matches_composition():
    _, p = random_params(5)
    lay = p.layers[0]
    z = np.random.default_rng(5).normal(size=(1, 5, 8))
    want = msa(lay.cma_ln(Tensor(z[0])), lay.cma).data + z[0]
    assert np.max(np.abs(cross_modal_attention(Tensor(z), lay.cma_ln, lay.cma).data[0] - want)) <= 1e-12


def test_ta_leaves_motion_and_language_bit_identical():
    _, p = random_params(6)
    lay = p.layers[0]
    b = bundle(np.random.default_rng(6))
    z = assemble_tokens(b)
    out = temporal_attention(z, b.hw, lay.ta_ln, lay.ta).data
    assert np.array_equal(out[:, b.hw:], z.data[:, b.hw:])
    assert not np.array_equal(out[:, :b.hw], z.data[:, :b.hw])


def test_ta_single_frame_is_spatial_attention():
    _, p = random_params(7)
    lay = p.layers[0]
    z = np.random.default_rng(7).normal(size=(1, 9, 8))
    want = msa(lay.ta_ln(Tensor(z[0, :4])), lay.ta).data + z[0, :4]
    out = temporal_attention(Tensor(z), 4, lay.ta_ln, lay.ta).data
    assert np.max(np.abs(out[0, :4] - want)) <= 1e-12


def test_ta_split_error():
    _, p = random_params(0)
    with pytest.raises(DimensionError):
        temporal_attention(Tensor(np.ones((2, 4, 8))), 4, p.layers[0].ta_ln, p.layers[0].ta)


def test_zero_weight_mmvt_is_identity():
    p = zero_params(layers=4)
    b = bundle(np.random.default_rng(8))
    za, zm, zl = mmvt_forward(b, p)
    assert np.array_equal(za.data, b.z_a.data) and np.array_equal(zm.data, b.z_m.data)
    assert np.array_equal(zl.data[0], b.z_l.data)


def test_zero_layers_is_identity():
    p = MmvtParams.create(ParamStore(0), "m", 8, 2, 0)
    b = bundle(np.random.default_rng(9))
    za, zm, _ = mmvt_forward(b, p)
    assert np.array_equal(za.data, b.z_a.data) and np.array_equal(zm.data, b.z_m.data)


def test_layer_shape_and_composition():
    _, p = random_params(10)
    lay = p.layers[0]
    z = Tensor(np.random.default_rng(10).normal(size=(3, 52, 8)))
    out = mmvt_layer(z, 16, lay)
    assert out.shape == (3, 52, 8)
    z1 = cross_modal_attention(z, lay.cma_ln, lay.cma)
    z2 = temporal_attention(z1, 16, lay.ta_ln, lay.ta)
    want = z2.data + mlp_block(lay.mlp_ln(z2), lay.mlp).data
    assert np.max(np.abs(out.data - want)) <= 1e-12


def test_four_layers_finite():
    _, p = random_params(11, layers=4)
    za, zm, zl = mmvt_forward(bundle(np.random.default_rng(11)), p)
    assert za.shape == (3, 16, 8) and zm.shape == (3, 16, 8) and zl.shape == (3, 20, 8)
    assert all(np.all(np.isfinite(t.data)) for t in (za, zm, zl))


def test_information_flows_across_frames_only_through_appearance():
    _, p = random_params(12, layers=2)
    rng = np.random.default_rng(12)
    b = bundle(rng, t=3, hw=4, l=3)
    base = mmvt_forward(b, p)
    za = b.z_a.data.copy()
    za[0] += rng.normal(size=za[0].shape)
    moved = mmvt_forward(ModalTokenBundle(Tensor(za), b.z_m, b.z_l), p)
    assert not np.allclose(moved[0].data[2], base[0].data[2])
    # frame 2's own motion and language rows see frame 0 only via appearance tokens, which
    # CMA of later layers mixes in; with TA removed, frames are fully independent
    _, no_ta = random_params(12, layers=2, ta=False)
    base = mmvt_forward(b, no_ta)
    moved = mmvt_forward(ModalTokenBundle(Tensor(za), b.z_m, b.z_l), no_ta)
    for out_b, out_m in zip(base, moved):
        assert np.array_equal(out_b.data[1:], out_m.data[1:])


def test_single_layer_ta_never_changes_motion_language_outputs_of_other_frames():
    _, p = random_params(13, layers=1)
    rng = np.random.default_rng(13)
    b = bundle(rng, t=2, hw=4, l=3)
    base = mmvt_forward(b, p)
    za = b.z_a.data.copy()
    za[0] += rng.normal(size=za[0].shape)
    moved = mmvt_forward(ModalTokenBundle(Tensor(za), b.z_m, b.z_l), p)
    assert np.array_equal(base[1].data[1], moved[1].data[1])
    assert np.array_equal(base[2].data[1], moved[2].data[1])
    assert not np.allclose(base[0].data[1], moved[0].data[1])


def test_map_token_round_trip():
    x = np.random.default_rng(14).normal(size=(2, 8, 3, 5))
    z = map_to_tokens(Tensor(x))
    assert z.shape == (2, 15, 8)
    assert np.array_equal(z.data[1, 7], x[1, :, 1, 2])
    assert np.array_equal(tokens_to_map(z, 3, 5).data, x)
    with pytest.raises(DimensionError):
        tokens_to_map(z, 4, 4)


def test_full_four_layer_mmvt_gradcheck():
    store, p = random_params(15, c=4, heads=2, layers=4)
    rng = np.random.default_rng(15)
    za, zm, zl = (ad.parameter(rng.normal(size=s)) for s in ((2, 2, 4), (2, 2, 4), (3, 4)))
    r = [rng.normal(size=s) for s in ((2, 2, 4), (2, 2, 4), (2, 3, 4))]

    def f():
        outs = mmvt_forward(ModalTokenBundle(za, zm, zl), p)
        return sum((ad.tsum(o * Tensor(ri)) for o, ri in zip(outs[1:], r[1:])), ad.tsum(outs[0] * Tensor(r[0])))

    # a small step keeps the perturbation from crossing any MLP ReLU kink in the 4-layer stack
    rep = finite_diff_check(f, {"za": za, "zm": zm, "zl": zl, **store.tensors}, h_rel=1e-6,
                            exclude=lambda name, idx: name.endswith(".k.b"))
    assert rep.passed, rep.worst
