"""Multi-modal video transformer: cross-modal attention, temporal attention, MLP."""
from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError
from .nn import LayerNormParams, MlpParams, MsaParams, ParamStore, mlp_block, msa


@dataclass
class ModalTokenBundle:
    z_a: Tensor  # [T, HW, C] appearance tokens
    z_m: Tensor | None  # [T, HW, C] motion tokens; None for appearance-only models
    z_l: Tensor  # [L, C] linguistic tokens, row 0 is [CLS]

    def __post_init__(self):
        t, hw, c = self.z_a.shape
        if self.z_m is not None and self.z_m.shape != (t, hw, c):
            raise DimensionError(f"motion tokens {self.z_m.shape} vs appearance tokens {self.z_a.shape}")
        if self.z_l.ndim != 2 or self.z_l.shape[1] != c:
            raise DimensionError(f"language tokens {self.z_l.shape} vs channel count {c}")
        if t < 1 or self.z_l.shape[0] < 1:
            raise DimensionError("bundle needs at least one frame and one language token")

    @property
    def frames(self) -> int:
        return self.z_a.shape[0]

    @property
    def hw(self) -> int:
        return self.z_a.shape[1]

    @property
    def has_motion(self) -> bool:
        return self.z_m is not None


@dataclass
class MmvtLayerParams:
    cma_ln: LayerNormParams | None
    cma: MsaParams | None
    ta_ln: LayerNormParams | None
    ta: MsaParams | None
    mlp_ln: LayerNormParams
    mlp: MlpParams


@dataclass
class MmvtParams:
    layers: list

    @classmethod
    def create(cls, store: ParamStore, name: str, c: int, heads: int = 4, n_layers: int = 4,
               mlp_ratio: int = 2, cma: bool = True, ta: bool = True) -> "MmvtParams":
        layers = []
        for i in range(n_layers):
            pre = f"{name}.{i}"
            layers.append(MmvtLayerParams(
                LayerNormParams.create(store, f"{pre}.cma_ln", c) if cma else None,
                MsaParams.create(store, f"{pre}.cma", c, heads) if cma else None,
                LayerNormParams.create(store, f"{pre}.ta_ln", c) if ta else None,
                MsaParams.create(store, f"{pre}.ta", c, heads) if ta else None,
                LayerNormParams.create(store, f"{pre}.mlp_ln", c),
                MlpParams.create(store, f"{pre}.mlp", c, mlp_ratio),
            ))
        return cls(layers)


def assemble_tokens(b: ModalTokenBundle) -> Tensor:
    """Per frame rows are ``[appearance(HW), motion(HW), language(L)]`` -> ``[T, 2HW+L, C]``.

    The language rows are broadcast over frames.  Without motion tokens the
    layout is ``[appearance, language]``.
    """
    t = b.frames
    z_l = ad.broadcast_to(ad.reshape(b.z_l, (1,) + b.z_l.shape), (t,) + b.z_l.shape)
    parts = [b.z_a, b.z_m, z_l] if b.has_motion else [b.z_a, z_l]
    return ad.concat(parts, axis=1)


def chunk_tokens(z: Tensor, hw: int, motion: bool = True) -> tuple:
    """Inverse of :func:`assemble_tokens`; language comes back as ``[T, L, C]``."""
    s = z.shape[1]
    n_vis = 2 * hw if motion else hw
    if s <= n_vis:
        raise DimensionError(f"token count {s} leaves no language rows for HW={hw}")
    if not motion:
        return z[:, :hw], None, z[:, hw:]
    return z[:, :hw], z[:, hw:n_vis], z[:, n_vis:]


def cross_modal_attention(z: Tensor, ln: LayerNormParams, p: MsaParams) -> Tensor:
    """``MSA(LN(z)) + z`` with attention confined to each frame's tokens."""
    return z + msa(ln(z), p)


def temporal_attention(z: Tensor, hw: int, ln: LayerNormParams, p: MsaParams) -> Tensor:
    """Self-attention over all frames' appearance tokens as one sequence.

    Motion and language rows are passed through untouched.
    """
    t, s, c = z.shape
    if hw < 1 or s <= hw:
        raise DimensionError(f"token count {s} inconsistent with HW={hw}")
    za = ad.reshape(z[:, :hw], (1, t * hw, c))
    za = za + msa(ln(za), p)
    return ad.concat([ad.reshape(za, (t, hw, c)), z[:, hw:]], axis=1)


def mmvt_layer(z: Tensor, hw: int, p: MmvtLayerParams) -> Tensor:
    if p.cma is not None:
        z = cross_modal_attention(z, p.cma_ln, p.cma)
    if p.ta is not None:
        z = temporal_attention(z, hw, p.ta_ln, p.ta)
    return z + mlp_block(p.mlp_ln(z), p.mlp)


def mmvt_forward(b: ModalTokenBundle, p: MmvtParams) -> tuple:
    """Run every layer and split the result into (appearance, motion, language) tokens."""
    z = assemble_tokens(b)
    for layer in p.layers:
        z = mmvt_layer(z, b.hw, layer)
    return chunk_tokens(z, b.hw, b.has_motion)


def tokens_to_map(z: Tensor, h: int, w: int) -> Tensor:
    """``[T, H*W, C]`` tokens -> ``[T, C, H, W]`` feature map."""
    t, hw, c = z.shape
    if hw != h * w:
        raise DimensionError(f"{hw} tokens cannot form a {h}x{w} map")
    return ad.transpose(ad.reshape(z, (t, h, w, c)), (0, 3, 1, 2))


def map_to_tokens(x: Tensor) -> Tensor:
    """``[T, C, H, W]`` feature map -> ``[T, H*W, C]`` tokens (row-major over space)."""
    t, c, h, w = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 3, 1)), (t, h * w, c))
