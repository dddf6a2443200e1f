"""Multi-modal alignment loss between language, appearance and motion embeddings.

Scores are ``sigmoid(tan(pi/2 * cos_sim))``; every term is a binary
cross-entropy of those scores against foreground/background labels.  The
BCE is evaluated on the pre-sigmoid value ``tan(pi/2 * sim)`` so saturated
scores stay finite.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decoder import LgffTrace
from .errors import DimensionError
from .mmvt import map_to_tokens
from .nn import MlpParams, ParamStore, mlp_block

SIM_CLAMP = 1.0 - 1e-6

# incremented whenever a zero-norm embedding is scored
diagnostics: Counter = Counter()


@dataclass
class AlignProjParams:
    app: MlpParams
    mot: MlpParams | None
    lang: MlpParams

    @classmethod
    def create(cls, store: ParamStore, name: str, c: int, embed: int, motion: bool = True) -> "AlignProjParams":
        return cls(
            MlpParams.create(store, f"{name}.app", 3 * c, 1, c_out=embed),
            MlpParams.create(store, f"{name}.mot", 3 * c, 1, c_out=embed) if motion else None,
            MlpParams.create(store, f"{name}.lang", c, 1, c_out=embed),
        )


def aggregate_modal_representation(maps: dict, proj: MlpParams) -> Tensor:
    """Upsample levels 2 and 3 to level 1, concat channels, embed per position.

    `maps` maps level -> ``[T, C, H_i, W_i]``; returns ``[T, H_1 * W_1, c]``.
    """
    base = maps[1]
    h, w = base.shape[-2:]
    parts = [base]
    for lv in (2, 3):
        m = maps[lv]
        mh, mw = m.shape[-2:]
        if h % mh or w % mw or h // mh != w // mw:
            raise DimensionError(f"level {lv} size {(mh, mw)} does not divide level-1 size {(h, w)}")
        parts.append(ad.bilinear_upsample(m, h // mh))
    tokens = map_to_tokens(ad.concat(parts, axis=1))
    return mlp_block(tokens, proj)


def trace_embeddings(trace: LgffTrace, stream: str, proj: MlpParams) -> Tensor:
    maps = trace.f_ea if stream == "appearance" else trace.f_em
    return aggregate_modal_representation(maps, proj)


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity along the last axis; zero-norm inputs give 0."""
    dot = (u * v).sum(-1)
    nu, nv = (u * u).sum(-1), (v * v).sum(-1)
    zu, zv = nu.data == 0, nv.data == 0
    n_zero = int(np.count_nonzero(zu) + np.count_nonzero(zv))
    if n_zero:
        diagnostics["zero_norm"] += n_zero
    denom = ad.sqrt((nu + zu.astype(float)) * (nv + zv.astype(float)))
    return dot / denom


def alignment_logit(sim: Tensor) -> Tensor:
    """``tan(pi/2 * sim)`` with sim clamped away from +-1."""
    return ad.tan(ad.clamp(sim, -SIM_CLAMP, SIM_CLAMP) * (np.pi / 2))


def alignment_score(u: Tensor, v: Tensor) -> Tensor:
    return ad.sigmoid(alignment_logit(cosine_similarity(u, v)))


def vision_language_alignment_loss(f_v: Tensor, f_l: Tensor, fore_mask, reduction: str = "mean") -> Tensor:
    """BCE pulling foreground positions of `f_v` [P, c] toward `f_l` [c], background away."""
    labels = np.asarray(fore_mask, dtype=bool).reshape(-1)
    if f_v.ndim != 2 or labels.size != f_v.shape[0]:
        raise DimensionError(f"embeddings {f_v.shape} vs mask of {labels.size} positions")
    sim = cosine_similarity(f_v, ad.reshape(f_l, (1, f_l.shape[-1])))
    return ad.bce_with_logits(alignment_logit(sim), labels, reduction)


def sample_pairs(n_pos: int, n_pairs: int, rng: np.random.Generator) -> tuple:
    """Position pairs for the appearance-motion term: exhaustive when P^2 <= 16 * n_pairs."""
    if n_pos * n_pos <= 16 * n_pairs:
        ii, jj = np.meshgrid(np.arange(n_pos), np.arange(n_pos), indexing="ij")
        return ii.reshape(-1), jj.reshape(-1)
    return rng.integers(0, n_pos, n_pairs), rng.integers(0, n_pos, n_pairs)


def cross_vision_alignment_loss(f_a: Tensor, f_m: Tensor, fore_mask, pairs: tuple, reduction: str = "mean") -> Tensor:
    """BCE over position pairs (i, j): label 1 iff i and j share fore/background."""
    fore = np.asarray(fore_mask, dtype=bool).reshape(-1)
    if f_a.shape != f_m.shape or f_a.shape[0] != fore.size:
        raise DimensionError(f"appearance {f_a.shape}, motion {f_m.shape}, mask {fore.size}")
    ii, jj = (np.asarray(p, dtype=np.int64) for p in pairs)
    sim = cosine_similarity(f_a[ii], f_m[jj])
    return ad.bce_with_logits(alignment_logit(sim), fore[ii] == fore[jj], reduction)


def total_alignment_loss(f_a: Tensor, f_m: Tensor | None, f_l: Tensor, masks, rng: np.random.Generator,
                         n_pairs: int = 256, terms=("al", "ml", "am"), reduction: str = "mean") -> tuple:
    """Sum of the enabled terms per frame, averaged over frames.

    `f_a`, `f_m` are ``[T, P, c]``, `masks` is boolean ``[T, P]``.  Returns
    ``(loss, per-term values averaged over frames)``.
    """
    masks = np.asarray(masks, dtype=bool)
    t, p = masks.shape[0], masks.reshape(masks.shape[0], -1).shape[1]
    parts = {k: [] for k in terms}
    for i in range(t):
        m = masks[i].reshape(-1)
        if "al" in terms:
            parts["al"].append(vision_language_alignment_loss(f_a[i], f_l, m, reduction))
        if "ml" in terms and f_m is not None:
            parts["ml"].append(vision_language_alignment_loss(f_m[i], f_l, m, reduction))
        if "am" in terms and f_m is not None:
            pairs = sample_pairs(p, n_pairs, rng)
            parts["am"].append(cross_vision_alignment_loss(f_a[i], f_m[i], m, pairs, reduction))
    flat = [x for k in terms for x in parts[k]]
    total = flat[0]
    for x in flat[1:]:
        total = total + x
    total = total * (1.0 / t)
    summary = {k: sum(x.item() for x in v) / t for k, v in parts.items() if v}
    return total, summary


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Area-majority pooling: a cell is foreground when >= half its pixels are."""
    *lead, h, w = mask.shape
    if h % factor or w % factor:
        raise DimensionError(f"mask {mask.shape} not divisible by {factor}")
    blocks = mask.reshape(*lead, h // factor, factor, w // factor, factor).astype(np.float64)
    return blocks.mean(axis=(-3, -1)) >= 0.5
