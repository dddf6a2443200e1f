"""Neural building blocks: parameters, attention, MLP, coordinate maps, ASPP."""
from __future__ import annotations

import functools
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError


class ParamStore:
    """Named leaf tensors with deterministic, name-keyed initialisation.

    Each tensor draws from its own generator seeded by ``(seed, crc32(name))``,
    so adding or removing a sub-module never changes the values of another.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.tensors: dict[str, Tensor] = {}

    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = ad.parameter(data)
        self.tensors[name] = t
        return t

    def glorot(self, name: str, shape: tuple, fan_in: int, fan_out: int) -> Tensor:
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return self._add(name, self._rng(name).uniform(-a, a, size=shape))

    def zeros(self, name: str, shape: tuple) -> Tensor:
        return self._add(name, np.zeros(shape))

    def ones(self, name: str, shape: tuple) -> Tensor:
        return self._add(name, np.ones(shape))

    def count(self, prefix: str = "") -> int:
        return sum(t.size for n, t in self.tensors.items() if n.startswith(prefix))

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self):
        return len(self.tensors)


@dataclass
class Linear:
    w: Tensor  # [in, out]
    b: Tensor

    @classmethod
    def create(cls, store: ParamStore, name: str, c_in: int, c_out: int) -> "Linear":
        return cls(store.glorot(f"{name}.w", (c_in, c_out), c_in, c_out), store.zeros(f"{name}.b", (c_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            return ad.reshape(ad.matmul(ad.reshape(x, (1, x.shape[0])), self.w), (self.w.shape[1],)) + self.b
        return ad.matmul(x, self.w) + self.b


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    @classmethod
    def create(cls, store: ParamStore, name: str, c: int, eps: float = 1e-5) -> "LayerNormParams":
        return cls(store.ones(f"{name}.gamma", (c,)), store.zeros(f"{name}.beta", (c,)), eps)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


@dataclass
class Conv:
    w: Tensor  # [C_out, C_in, kh, kw]
    b: Tensor
    stride: int = 1
    dilation: int = 1
    padding: int | tuple = 0

    @classmethod
    def create(cls, store: ParamStore, name: str, c_in: int, c_out: int, k: int = 3, stride: int = 1, dilation: int = 1, padding=None) -> "Conv":
        if padding is None:
            padding = dilation * (k // 2)
        w = store.glorot(f"{name}.w", (c_out, c_in, k, k), c_in * k * k, c_out * k * k)
        return cls(w, store.zeros(f"{name}.b", (c_out,)), stride, dilation, padding)

    @property
    def out_channels(self) -> int:
        return self.w.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, self.stride, self.dilation, self.padding)


@dataclass
class MsaParams:
    q: Linear
    k: Linear
    v: Linear
    o: Linear
    heads: int

    @classmethod
    def create(cls, store: ParamStore, name: str, c: int, heads: int) -> "MsaParams":
        if heads < 1 or c % heads:
            raise ConfigError(f"channels {c} not divisible by head count {heads}")
        return cls(*(Linear.create(store, f"{name}.{s}", c, c) for s in "qkvo"), heads)


@dataclass
class MlpParams:
    fc1: Linear
    fc2: Linear

    @classmethod
    def create(cls, store: ParamStore, name: str, c: int, ratio: int = 2, c_out: int | None = None) -> "MlpParams":
        if ratio < 1:
            raise ConfigError("MLP expansion ratio must be >= 1")
        return cls(Linear.create(store, f"{name}.fc1", c, c * ratio), Linear.create(store, f"{name}.fc2", c * ratio, c_out or c))


@dataclass
class AsppParams:
    branches: list  # of Conv, the first one 1x1
    fuse: Conv

    @classmethod
    def create(cls, store: ParamStore, name: str, c_in: int, c: int, dilations=(1, 2, 4)) -> "AsppParams":
        branches = [Conv.create(store, f"{name}.b0", c_in, c, k=1)]
        for i, d in enumerate(dilations, start=1):
            branches.append(Conv.create(store, f"{name}.b{i}", c_in, c, k=3, dilation=d))
        fuse = Conv.create(store, f"{name}.fuse", c * len(branches), c, k=1)
        return cls(branches, fuse)


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) over the key axis; q, k are ``[..., N, d]``."""
    d = q.shape[-1]
    scores = ad.matmul(q, ad.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    return ad.softmax(scores * (1.0 / np.sqrt(d)), -1)


def msa(x: Tensor, p: MsaParams) -> Tensor:
    """Multi-head self-attention over the token axis of ``[N, C]`` or ``[B, N, C]``.

    No positional encoding is added, so the map is token-permutation
    equivariant.
    """
    single = x.ndim == 2
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    b, n, c = x.shape
    h = p.heads
    if c % h:
        raise ConfigError(f"channels {c} not divisible by head count {h}")
    d = c // h

    def split(t):
        return ad.transpose(ad.reshape(t, (b, n, h, d)), (0, 2, 1, 3))

    q, k, v = split(p.q(x)), split(p.k(x)), split(p.v(x))
    heads = ad.matmul(attention_weights(q, k), v)
    merged = ad.reshape(ad.transpose(heads, (0, 2, 1, 3)), (b, n, c))
    out = p.o(merged)
    return ad.reshape(out, (n, c)) if single else out


def mlp_block(x: Tensor, p: MlpParams) -> Tensor:
    return p.fc2(ad.relu(p.fc1(x)))


def coordinate_features(h: int, w: int) -> Tensor:
    """8-channel spatial encoding ``[x_c, y_c, x_l, x_r, y_t, y_b, 1/W, 1/H]``.

    Centres span [-1, 1] (0 on a length-1 axis); cell edges are ``2j/W - 1``
    and ``2(j+1)/W - 1``.
    """
    if h < 1 or w < 1:
        raise DimensionError(f"coordinate grid must be at least 1x1, got {(h, w)}")
    return Tensor(_coordinate_array(h, w).copy())


@functools.lru_cache(maxsize=32)
def _coordinate_array(h: int, w: int) -> np.ndarray:
    j = np.arange(w, dtype=np.float64)
    i = np.arange(h, dtype=np.float64)
    xc = 2 * j / (w - 1) - 1 if w > 1 else np.zeros(w)
    yc = 2 * i / (h - 1) - 1 if h > 1 else np.zeros(h)
    rows = [
        np.broadcast_to(xc[None, :], (h, w)),
        np.broadcast_to(yc[:, None], (h, w)),
        np.broadcast_to((2 * j / w - 1)[None, :], (h, w)),
        np.broadcast_to((2 * (j + 1) / w - 1)[None, :], (h, w)),
        np.broadcast_to((2 * i / h - 1)[:, None], (h, w)),
        np.broadcast_to((2 * (i + 1) / h - 1)[:, None], (h, w)),
        np.full((h, w), 1.0 / w),
        np.full((h, w), 1.0 / h),
    ]
    return np.stack(rows)


def tile_coords(pc: Tensor, n: int) -> Tensor:
    """Repeat a ``[8, H, W]`` coordinate map over a batch of `n` frames."""
    return Tensor(np.broadcast_to(pc.data[None], (n,) + pc.shape))


def simplified_aspp(x: Tensor, p: AsppParams) -> Tensor:
    """Parallel 1x1 and dilated 3x3 branches (ReLU each), fused by a 1x1 conv.

    Works on ``[C_in, H, W]`` or ``[N, C_in, H, W]``; spatial size is kept.
    """
    h, w = x.shape[-2:]
    for br in p.branches:
        if br.w.shape[-1] > 1 and (br.dilation >= h or br.dilation >= w):
            raise DimensionError(f"ASPP dilation {br.dilation} too large for a {h}x{w} input")
    outs = [ad.relu(br(x)) for br in p.branches]
    return p.fuse(ad.concat(outs, axis=-3))
