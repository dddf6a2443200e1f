"""Finite-difference gradient checks for every building block, runnable from the CLI."""
from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import autodiff as ad
from .align import cross_vision_alignment_loss, sample_pairs, vision_language_alignment_loss
from .autodiff import Tensor, finite_diff_check
from .config import RunConfig, get_preset
from .decoder import LgffLevelParams, lgff_fuse
from .model import SegModel
from .mmvt import MmvtParams, mmvt_layer
from .nn import AsppParams, Conv, LayerNormParams, MlpParams, MsaParams, ParamStore, mlp_block, msa, simplified_aspp
from .world import SceneObject, SceneSpec, generate_clip


def _probe(out: Tensor, seed: int) -> Tensor:
    """Scalar ``sum(out * R)`` with a fixed random R, so every output entry matters."""
    r = np.random.default_rng([seed, 99]).normal(size=out.shape)
    return ad.tsum(out * Tensor(r))


def key_bias(name: str, idx: tuple) -> bool:
    """Attention key biases shift every score of a query equally; softmax cancels
    them, so their gradient is exactly zero and only roundoff is left to compare."""
    return name.endswith(".k.b")


def _input(rng, shape) -> Tensor:
    return ad.parameter(rng.normal(size=shape))


def check_msa(seed=0, **kw):
    rng, store = np.random.default_rng(seed), ParamStore(seed)
    p = MsaParams.create(store, "msa", 8, 2)
    x = _input(rng, (2, 5, 8))
    return finite_diff_check(lambda: _probe(msa(x, p), seed), {"x": x, **store.tensors}, exclude=key_bias, **kw)


def check_layer_norm(seed=0, **kw):
    rng, store = np.random.default_rng(seed), ParamStore(seed)
    p = LayerNormParams.create(store, "ln", 6)
    p.gamma.data = rng.normal(size=6)
    p.beta.data = rng.normal(size=6)
    x = _input(rng, (4, 6))
    return finite_diff_check(lambda: _probe(p(x), seed), {"x": x, **store.tensors}, **kw)


def check_mlp(seed=0, **kw):
    rng, store = np.random.default_rng(seed), ParamStore(seed)
    p = MlpParams.create(store, "mlp", 6, 2)
    for t in store:
        t.data = t.data + 0.1 * rng.normal(size=t.shape)
    x = _input(rng, (5, 6))
    return finite_diff_check(lambda: _probe(mlp_block(x, p), seed), {"x": x, **store.tensors}, **kw)


def check_conv(seed=0, **kw):
    rng = np.random.default_rng(seed)
    x = _input(rng, (2, 3, 7, 6))
    w = _input(rng, (4, 3, 3, 3))
    b = _input(rng, (4,))
    return finite_diff_check(lambda: _probe(ad.conv2d(x, w, b, stride=2, dilation=1, padding=1), seed)
                             + _probe(ad.conv2d(x, w, b, stride=1, dilation=2, padding=2), seed + 1),
                             {"x": x, "w": w, "b": b}, **kw)


def check_upsample(seed=0, **kw):
    rng = np.random.default_rng(seed)
    x = _input(rng, (2, 3, 4, 5))
    return finite_diff_check(lambda: _probe(ad.bilinear_upsample(x, 2), seed)
                             + _probe(ad.bilinear_upsample(x, 4), seed + 1), {"x": x}, **kw)


def check_aspp(seed=0, **kw):
    rng, store = np.random.default_rng(seed), ParamStore(seed)
    p = AsppParams.create(store, "aspp", 5, 4, (1, 2))
    x = _input(rng, (2, 5, 6, 6))
    return finite_diff_check(lambda: _probe(simplified_aspp(x, p), seed), {"x": x, **store.tensors}, **kw)


def check_mmvt_layer(seed=0, **kw):
    rng, store = np.random.default_rng(seed), ParamStore(seed)
    p = MmvtParams.create(store, "mmvt", 8, 2, 1, 2).layers[0]
    for t in store:  # move LN affine params off their (1, 0) initial values
        t.data = t.data + 0.1 * rng.normal(size=t.shape)
    hw = 4
    z = _input(rng, (2, 2 * hw + 3, 8))
    return finite_diff_check(lambda: _probe(mmvt_layer(z, hw, p), seed), {"z": z, **store.tensors},
                             exclude=key_bias, **kw)


def check_lgff_level(seed=0, **kw):
    rng, store = np.random.default_rng(seed), ParamStore(seed)
    p = LgffLevelParams.create(store, "lgff", 3, 2, 4)
    for t in store:
        t.data = t.data + 0.1 * rng.normal(size=t.shape)
    f_a, f_m = _input(rng, (1, 3, 4, 4)), _input(rng, (1, 2, 4, 4))
    f_prev, cls = _input(rng, (1, 4, 2, 2)), _input(rng, (4,))
    return finite_diff_check(lambda: _probe(lgff_fuse(f_a, f_m, f_prev, cls, p)["f"], seed),
                             {"f_a": f_a, "f_m": f_m, "f_prev": f_prev, "cls": cls, **store.tensors}, **kw)


def _align_inputs(seed):
    rng = np.random.default_rng(seed)
    f_v, f_w, f_l = _input(rng, (12, 5)), _input(rng, (12, 5)), _input(rng, (5,))
    mask = np.zeros(12, dtype=bool)
    mask[rng.choice(12, 5, replace=False)] = True
    return f_v, f_w, f_l, mask


def check_align_al(seed=0, **kw):
    f_v, _, f_l, mask = _align_inputs(seed)
    return finite_diff_check(lambda: vision_language_alignment_loss(f_v, f_l, mask), {"f_a": f_v, "f_l": f_l}, **kw)


def check_align_ml(seed=0, **kw):
    _, f_m, f_l, mask = _align_inputs(seed + 1)
    return finite_diff_check(lambda: vision_language_alignment_loss(f_m, f_l, mask, "sum"), {"f_m": f_m, "f_l": f_l}, **kw)


def check_align_am(seed=0, **kw):
    f_a, f_m, _, mask = _align_inputs(seed + 2)
    pairs = sample_pairs(12, 256, np.random.default_rng(seed))
    return finite_diff_check(lambda: cross_vision_alignment_loss(f_a, f_m, mask, pairs), {"f_a": f_a, "f_m": f_m}, **kw)


MICRO_CONFIG = dict(frames=1, canvas=16, channels=8, heads=2, layers=1, mlp_ratio=2, embed_dim=4, text_len=8,
                    text_embed=4, enc_widths=(4, 4, 4, 4), aspp_dilations=(1,))


def micro_clip(frames: int = 1, canvas: int = 16):
    obj = SceneObject("square", "red", 6, (3, 4), (1, 0), True)
    return generate_clip(SceneSpec((obj,), canvas, canvas, frames, 0.03), seed=0, name="micro")


def check_model(seed=0, h_rel=3e-5, **kw):
    """Whole model, every preset flag that adds parameters on, on a one-frame micro clip."""
    model = SegModel(RunConfig(seed=seed, **MICRO_CONFIG), get_preset("B+M+T+L+A"))
    rng = np.random.default_rng(seed)
    for t in model.params.values():  # break the zero-bias / unit-gain symmetry of a fresh init
        t.data = t.data + 0.05 * rng.normal(size=t.shape)
    clip = micro_clip()
    return finite_diff_check(lambda: model.loss(clip, rng=np.random.default_rng(0))[0], model.params,
                             h_rel=h_rel, seed=seed, exclude=key_bias, **kw)


CHECKS: dict[str, Callable] = {
    "msa": check_msa,
    "layer_norm": check_layer_norm,
    "mlp": check_mlp,
    "conv": check_conv,
    "upsample": check_upsample,
    "aspp": check_aspp,
    "mmvt_layer": check_mmvt_layer,
    "lgff_level": check_lgff_level,
    "align_al": check_align_al,
    "align_ml": check_align_ml,
    "align_am": check_align_am,
    "model": check_model,
}


def run_suite(names=None, tol: float = 1e-4, echo=None) -> dict:
    """Run the named checks (all by default); returns ``name -> (report, seconds)``."""
    results = {}
    for name in names or CHECKS:
        t0 = time.perf_counter()
        rep = CHECKS[name](tol=tol)
        results[name] = (rep, time.perf_counter() - t0)
        if echo is not None:
            echo(f"{name:<11} {'PASS' if rep.passed else 'FAIL'}  max_rel_error {rep.worst:.3e}  tol {tol:g}")
    return results
