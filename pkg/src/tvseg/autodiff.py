"""A small reverse-mode automatic differentiation engine over float64 numpy arrays.

Every operation returns a new :class:`Tensor`.  When at least one input
requires a gradient the output records its parents and a closure that maps
the output gradient to input gradients; :func:`backward` walks the recorded
graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import functools
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, UsageError

_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording graph edges (inference only)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "node_id", "op")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), backward_fn=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.node_id = next(_ids)
        self.op = op

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def _raise_not_scalar(t: Tensor):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """A leaf tensor that requires a gradient."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap `data`; record graph edges only when some parent needs a gradient."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn, op=op)
    return Tensor(data, op=op)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Graph and backward pass
# ---------------------------------------------------------------------------
@dataclass
class Graph:
    """Recorded operations reachable from an output, in topological order."""

    nodes: list = field(default_factory=list)
    order: dict = field(default_factory=dict)

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in node.parents:
                if p.node_id not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(nodes, {n.node_id: i for i, n in enumerate(nodes)})

    def __contains__(self, t: Tensor) -> bool:
        return t.node_id in self.order

    def leaves(self) -> list:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]


def backward(seed: Tensor, graph: Graph | None = None, leaves: Iterable[Tensor] | None = None):
    """Accumulate d(seed)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    If `leaves` is given, returns their gradients in order; leaves the seed
    does not depend on get exact zeros.
    """
    if seed.size != 1:
        raise UsageError(f"backward seed must be a scalar, got shape {seed.shape}")
    if graph is None:
        graph = Graph.trace(seed)
    elif seed not in graph:
        raise UsageError("seed tensor is not part of the given graph")
    grads: dict[int, np.ndarray] = {seed.node_id: np.ones_like(seed.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg
    if leaves is None:
        return None
    out = []
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        out.append(leaf.grad)
    return out


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g / (2.0 * out),), "sqrt")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tan(x: Tensor) -> Tensor:
    out = np.tan(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 + out * out),), "tan")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; the gradient is zero wherever clipping is active."""
    xd = x.data
    out = np.clip(xd, lo, hi)
    keep = np.ones(xd.shape, dtype=bool)
    if lo is not None:
        keep &= xd >= lo
    if hi is not None:
        keep &= xd <= hi
    return _make(out, (x,), lambda g: (g * keep,), "clamp")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.logaddexp(0.0, xd), (x,), lambda g: (g * _sigmoid_np(xd),), "softplus")


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept), shape),)

    return _make(x.data.sum(axis=axes, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(
                f"concat on axis {axis}: shapes {[u.shape for u in tensors]} disagree off-axis"
            )
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: {old} -> {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (unbroadcast(g, old),), "broadcast")


# ---------------------------------------------------------------------------
# Linear algebra and neural-network primitives
# ---------------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions broadcast as in ``numpy.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible") from None

    def bw(g):
        g = np.ascontiguousarray(g)  # zero-stride views from sums would bypass BLAS
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return _make(out, (a, b), bw, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last dimension, got {x.shape}")
    return softmax(x, -1)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis by its mean and population variance, then scale and shift."""
    if eps <= 0:
        raise UsageError("layer_norm eps must be positive")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: x {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


def _pair(v) -> tuple:
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, dilation: int = 1, padding=0) -> Tensor:
    """2-D cross-correlation with zero padding.

    `x` is ``[C_in, H, W]`` or batched ``[N, C_in, H, W]``; `weight` is
    ``[C_out, C_in, kh, kw]``.  `padding` may be an int or ``(ph, pw)``.
    """
    single = x.ndim == 3
    if x.ndim not in (3, 4) or weight.ndim != 4:
        raise DimensionError(f"conv2d: input {x.shape}, weight {weight.shape}")
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels but weight {weight.shape} expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"conv2d: bias {bias.shape} for {co} output channels")
    ph, pw = _pair(padding)
    ho = (h + 2 * ph - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * pw - dilation * (kw - 1) - 1) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(
            f"conv2d: non-positive output extent {(ho, wo)} for input {x.shape}, kernel {(kh, kw)}, "
            f"stride {stride}, dilation {dilation}, padding {(ph, pw)}"
        )
    if ph or pw:
        xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
        xp[:, :, ph : ph + h, pw : pw + w] = xd
    else:
        xp = xd
    # im2col kept in [N, C*kh*kw, Ho*Wo] so no transposes are needed
    windows = [
        (slice(i * dilation, i * dilation + stride * (ho - 1) + 1, stride),
         slice(j * dilation, j * dilation + stride * (wo - 1) + 1, stride))
        for i in range(kh) for j in range(kw)
    ]
    cols = np.empty((n, c, kh * kw, ho, wo))
    for k, (sh, sw) in enumerate(windows):
        cols[:, :, k] = xp[:, :, sh, sw]
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    w2 = weight.data.reshape(co, -1)
    out = np.matmul(w2, cols).reshape(n, co, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]
    if single:
        out = out[0]

    def bw(g):
        g3 = np.ascontiguousarray(g).reshape(n, co, ho * wo)
        gw = np.zeros_like(w2)
        for b in range(n):
            gw += g3[b] @ cols[b].T
        gx = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, g3).reshape(n, c, kh * kw, ho, wo)
            dxp = np.zeros(xp.shape)
            for k, (sh, sw) in enumerate(windows):
                dxp[:, :, sh, sw] += dcols[:, :, k]
            gx = dxp[:, :, ph : ph + h, pw : pw + w]
            gx = gx[0] if single else gx
        gw = gw.reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 2))

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, bw, "conv2d")


@functools.lru_cache(maxsize=64)
def interp_matrix(n: int, factor: int) -> np.ndarray:
    """Row ``o`` holds the bilinear weights of output sample ``o`` (align-corners off).

    Results are cached and returned read-only.
    """
    m = np.zeros((n * factor, n))
    for o in range(n * factor):
        src = min(max((o + 0.5) / factor - 0.5, 0.0), n - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    m.flags.writeable = False
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Upsample the last two axes by an integer factor."""
    if factor < 1:
        raise DimensionError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,), "upsample")
    h, w = x.shape[-2:]
    mh, mw = interp_matrix(h, factor), interp_matrix(w, factor)
    out = mh @ x.data @ mw.T
    return _make(out, (x,), lambda g: (mh.T @ g @ mw,), "upsample")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    return getitem(table, np.asarray(ids, dtype=np.int64))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------
def bce_with_logits(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets, computed stably."""
    y = np.asarray(targets, dtype=np.float64)
    z = logits.data
    per = np.logaddexp(0.0, z) - y * z
    total = per.sum()
    scale = 1.0 / per.size if reduction == "mean" else 1.0
    if reduction not in ("mean", "sum"):
        raise UsageError(f"unknown reduction {reduction!r}")

    def bw(g):
        return (g * scale * (_sigmoid_np(z) - y),)

    return _make(np.asarray(total * scale), (logits,), bw, "bce_with_logits")


def binary_cross_entropy(probs: Tensor, targets, eps: float = 1e-7) -> Tensor:
    """Mean BCE on probabilities, clipped to ``[eps, 1-eps]`` before the logs."""
    y = np.asarray(targets, dtype=np.float64)
    p = clamp(probs, eps, 1.0 - eps)
    per = -(mul(log(p), y) + mul(log(1.0 - p), 1.0 - y))
    return mean(per)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------
@dataclass
class GradCheckReport:
    max_rel_error: dict
    passed: bool
    step: float
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: dict | Sequence[Tensor],
    h_rel: float = 1e-5,
    tol: float = 1e-4,
    coords_per_tensor: int = 64,
    seed: int = 0,
    exclude: Callable[[str, tuple], bool] | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` with central differences.

    Step per coordinate is ``h_rel * max(1, |p|)``; relative error is
    ``|a - n| / max(1e-8, |a| + |n|)``.  Tensors larger than
    `coords_per_tensor` are checked on a seeded random subset.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
        p.data = np.ascontiguousarray(p.data)  # coordinates are perturbed through a flat view
    out = f()
    if out.size != 1:
        raise UsageError("finite_diff_check needs a scalar function")
    analytic = dict(zip(params, backward(out, leaves=list(params.values()))))
    analytic = {k: v.copy() for k, v in analytic.items()}
    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        picks = np.arange(n) if n <= coords_per_tensor else np.sort(rng.choice(n, coords_per_tensor, replace=False))
        worst = 0.0
        for k in picks:
            idx = np.unravel_index(k, p.shape)
            if exclude is not None and exclude(name, idx):
                continue
            orig = flat[k]
            h = h_rel * max(1.0, abs(orig))
            with no_grad():
                flat[k] = orig + h
                fp = f().item()
                flat[k] = orig - h
                fm = f().item()
            flat[k] = orig
            num = (fp - fm) / (2.0 * h)
            a = analytic[name].reshape(-1)[k]
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
        errors[name] = worst
    return GradCheckReport(errors, all(e <= tol for e in errors.values()), h_rel, tol)
