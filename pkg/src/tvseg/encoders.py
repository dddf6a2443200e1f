"""Small learned encoders for frames, flow maps and token sequences."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decoder import FeaturePyramid
from .errors import DimensionError, VocabularyError
from .nn import AsppParams, Conv, ParamStore, coordinate_features, simplified_aspp, tile_coords
from .world import CLS_ID, PAD_ID, SEP_ID, VOCAB

STAGE_STRIDES = (2, 2, 2, 1)


@dataclass
class VisualEncoderParams:
    stages: list  # four 3x3 convs with strides 2, 2, 2, 1
    aspp: AsppParams
    in_channels: int

    @classmethod
    def create(cls, store: ParamStore, name: str, in_channels: int, widths, c: int, dilations=(1, 2, 4)) -> "VisualEncoderParams":
        stages, prev = [], in_channels
        for i, (wd, s) in enumerate(zip(widths, STAGE_STRIDES)):
            stages.append(Conv.create(store, f"{name}.stage{i + 1}", prev, wd, k=3, stride=s))
            prev = wd
        return cls(stages, AsppParams.create(store, f"{name}.aspp", prev + 8, c, dilations), in_channels)


def encode_visual(x: Tensor, p: VisualEncoderParams) -> tuple:
    """``[T, C_in, H, W]`` -> (pyramid of 4 levels, ``[T, C, H/8, W/8]`` ASPP output).

    The top level is concatenated with coordinate features before the ASPP.
    """
    if x.ndim != 4 or x.shape[1] != p.in_channels:
        raise DimensionError(f"encoder expects [T, {p.in_channels}, H, W], got {x.shape}")
    h, w = x.shape[-2:]
    if h % 8 or w % 8:
        raise DimensionError(f"input {h}x{w} must be divisible by 8 for three stride-2 stages")
    levels, f = [], x
    for conv in p.stages:
        f = ad.relu(conv(f))
        levels.append(f)
    top = levels[-1]
    pc = tile_coords(coordinate_features(*top.shape[-2:]), top.shape[0])
    return FeaturePyramid(levels), simplified_aspp(ad.concat([top, pc], axis=1), p.aspp)


@dataclass
class TextEncoderParams:
    table: Tensor  # [V, E]; the [CLS] row is learned like any other
    conv: Conv  # 1-D conv to C channels, stored as a [C, E, 1, k] kernel
    max_len: int

    @classmethod
    def create(cls, store: ParamStore, name: str, embed: int, c: int, max_len: int, kernel: int = 1) -> "TextEncoderParams":
        table = store.glorot(f"{name}.table", (len(VOCAB), embed), len(VOCAB), embed)
        w = store.glorot(f"{name}.conv.w", (c, embed, 1, kernel), embed * kernel, c * kernel)
        conv = Conv(w, store.zeros(f"{name}.conv.b", (c,)), 1, 1, (0, kernel // 2))
        return cls(table, conv, max_len)


def pad_tokens(ids: list, max_len: int) -> np.ndarray:
    if len(ids) > max_len:
        raise DimensionError(f"token sequence of length {len(ids)} exceeds the maximum {max_len}")
    bad = [i for i in ids if not 0 <= i < len(VOCAB)]
    if bad:
        raise VocabularyError(f"token ids {bad} are outside the vocabulary")
    return np.array(list(ids) + [PAD_ID] * (max_len - len(ids)), dtype=np.int64)


def encode_text(ids: list, p: TextEncoderParams) -> tuple:
    """Token ids -> ``(z_L [L_max, C], cls [C])``.

    The [CLS] row adds the mean embedding of the sentence words, a one-step
    stand-in for contextual pooling, before the 1-D conv.
    """
    padded = pad_tokens(ids, p.max_len)
    emb = ad.embedding(p.table, padded)
    words = np.flatnonzero(~np.isin(padded, (PAD_ID, CLS_ID, SEP_ID)))
    if words.size:
        pool = np.zeros((p.max_len, p.max_len))
        pool[0, words] = 1.0 / words.size
        emb = emb + ad.matmul(Tensor(pool), emb)
    x = ad.reshape(ad.transpose(emb, (1, 0)), (1, emb.shape[1], 1, p.max_len))
    z = ad.transpose(ad.reshape(p.conv(x), (p.conv.out_channels, p.max_len)), (1, 0))
    return z, z[0]
