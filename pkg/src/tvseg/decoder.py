"""Language-guided feature fusion decoder, the plain concatenation decoders, and the head."""
from __future__ import annotations

from dataclasses import dataclass, field

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError
from .nn import Conv, ParamStore, coordinate_features, tile_coords


@dataclass
class FeaturePyramid:
    """Per-level ``[T, C_i, H_i, W_i]`` maps; levels 1..4 stored at index 0..3."""

    levels: list

    def __post_init__(self):
        if len(self.levels) != 4:
            raise DimensionError(f"pyramid needs 4 levels, got {len(self.levels)}")
        sizes = [lv.shape[-2:] for lv in self.levels]
        t = self.levels[0].shape[0]
        ok = all(lv.shape[0] == t for lv in self.levels)
        ok &= sizes[0] == (2 * sizes[1][0], 2 * sizes[1][1]) and sizes[1] == (2 * sizes[2][0], 2 * sizes[2][1])
        ok &= sizes[2] == sizes[3]
        if not ok:
            raise DimensionError(f"pyramid level sizes {sizes} break the 2,2,1 ratio pattern")

    def __getitem__(self, level: int) -> Tensor:
        return self.levels[level - 1]

    def size(self, level: int) -> tuple:
        return tuple(self.levels[level - 1].shape[-2:])


@dataclass
class LgffLevelParams:
    red_a: Conv
    fuse_a: Conv
    att_a: Conv
    red_m: Conv | None
    fuse_m: Conv | None
    att_m: Conv | None
    out1: Conv
    out2: Conv

    @classmethod
    def create(cls, store: ParamStore, name: str, c_a: int, c_m: int | None, c: int) -> "LgffLevelParams":
        motion = c_m is not None
        return cls(
            Conv.create(store, f"{name}.red_a", c_a, c, k=1),
            Conv.create(store, f"{name}.fuse_a", 8 + 2 * c, c, k=3),
            Conv.create(store, f"{name}.att_a", c, 1, k=1),
            Conv.create(store, f"{name}.red_m", c_m, c, k=1) if motion else None,
            Conv.create(store, f"{name}.fuse_m", 8 + 2 * c, c, k=3) if motion else None,
            Conv.create(store, f"{name}.att_m", c, 1, k=1) if motion else None,
            Conv.create(store, f"{name}.out1", (2 if motion else 1) * c, c, k=3),
            Conv.create(store, f"{name}.out2", c, c, k=3),
        )


@dataclass
class CatLevelParams:
    """Concatenation + convolution fusion of one decoder level."""

    red_a: Conv
    red_m: Conv | None
    fuse: Conv
    out: Conv
    use_language: bool

    @classmethod
    def create(cls, store: ParamStore, name: str, c_a: int, c_m: int | None, c: int, use_language: bool) -> "CatLevelParams":
        c_in = 8 + 2 * c + (c if c_m is not None else 0) + (c if use_language else 0)
        return cls(
            Conv.create(store, f"{name}.red_a", c_a, c, k=1),
            Conv.create(store, f"{name}.red_m", c_m, c, k=1) if c_m is not None else None,
            Conv.create(store, f"{name}.fuse", c_in, c, k=3),
            Conv.create(store, f"{name}.out", c, c, k=3),
            use_language,
        )


@dataclass
class LgffTrace:
    """Intermediate maps per level (keys 1..3), kept for the alignment loss."""

    f_ea: dict = field(default_factory=dict)
    f_em: dict = field(default_factory=dict)
    g_ea: dict = field(default_factory=dict)
    g_em: dict = field(default_factory=dict)
    att_a: dict = field(default_factory=dict)
    att_m: dict = field(default_factory=dict)
    f: dict = field(default_factory=dict)


def _upsample_to(x: Tensor, size: tuple) -> Tensor:
    h, w = x.shape[-2:]
    if size[0] % h or size[1] % w or size[0] // h != size[1] // w:
        raise DimensionError(f"cannot upsample {(h, w)} to {size} by an integer factor")
    return ad.bilinear_upsample(x, size[0] // h)


def _scale_channels(x: Tensor, cls: Tensor) -> Tensor:
    return x * ad.reshape(cls, (1, cls.shape[0], 1, 1))


def lgff_fuse(f_a: Tensor, f_m: Tensor | None, f_prev: Tensor, cls: Tensor, p: LgffLevelParams) -> dict:
    """One language-guided fusion level.

    Each stream is reduced to C channels, concatenated with coordinates and
    the upsampled previous output, fused by a 3x3 conv and scaled channel-wise
    by `cls`.  Both spatial attention maps come from the appearance stream.
    Returns the named intermediates (``f``, ``f_ea``, ``g_ea``, ``att_a``
    and, with motion, their ``_m`` counterparts).
    """
    t, _, h, w = f_a.shape
    up = _upsample_to(f_prev, (h, w))
    pc = tile_coords(coordinate_features(h, w), t)
    out = {}
    f_ea = _scale_channels(p.fuse_a(ad.concat([pc, up, p.red_a(f_a)], axis=1)), cls)
    att_a = ad.sigmoid(p.att_a(f_ea))
    g_ea = att_a * f_ea + f_ea
    out.update(f_ea=f_ea, att_a=att_a, g_ea=g_ea)
    streams = [g_ea]
    if f_m is not None:
        if f_m.shape[-2:] != (h, w):
            raise DimensionError(f"motion level {f_m.shape} vs appearance level {f_a.shape}")
        f_em = _scale_channels(p.fuse_m(ad.concat([pc, up, p.red_m(f_m)], axis=1)), cls)
        att_m = ad.sigmoid(p.att_m(f_ea))
        g_em = att_m * f_em + f_em
        out.update(f_em=f_em, att_m=att_m, g_em=g_em)
        streams.append(g_em)
    out["f"] = ad.relu(p.out2(ad.relu(p.out1(ad.concat(streams, axis=1)))))
    return out


def cat_fuse(f_a: Tensor, f_m: Tensor | None, f_prev: Tensor, cls: Tensor, p: CatLevelParams) -> Tensor:
    t, _, h, w = f_a.shape
    parts = [tile_coords(coordinate_features(h, w), t), _upsample_to(f_prev, (h, w)), p.red_a(f_a)]
    if p.red_m is not None:
        parts.append(p.red_m(f_m))
    if p.use_language:
        parts.append(ad.broadcast_to(ad.reshape(cls, (1, cls.shape[0], 1, 1)), (t, cls.shape[0], h, w)))
    return ad.relu(p.out(ad.relu(p.fuse(ad.concat(parts, axis=1)))))


def decode_pyramid(app: FeaturePyramid, mot: FeaturePyramid | None, top: Tensor, cls: Tensor, levels: list) -> tuple:
    """Run levels 3, 2, 1 starting from the top map; returns ``(f1, trace)``.

    `levels` holds the per-level params for levels 1..3 (index 0..2), either
    all :class:`LgffLevelParams` or all :class:`CatLevelParams`.
    """
    trace = LgffTrace()
    f = top
    for i in (3, 2, 1):
        p = levels[i - 1]
        f_m = mot[i] if mot is not None else None
        if isinstance(p, LgffLevelParams):
            res = lgff_fuse(app[i], f_m, f, cls, p)
            for key in ("f_ea", "f_em", "g_ea", "g_em", "att_a", "att_m"):
                if key in res:
                    getattr(trace, key)[i] = res[key]
            f = res["f"]
        else:
            f = cat_fuse(app[i], f_m, f, cls, p)
        trace.f[i] = f
    return f, trace


def segmentation_head(f1: Tensor, head: Conv, factor: int) -> tuple:
    """1x1 conv to one channel; returns ``(logits, full-resolution probabilities)``."""
    logits = head(f1)
    return logits, ad.bilinear_upsample(ad.sigmoid(logits), factor)


def binarize(probs, threshold: float = 0.5):
    """Foreground where probability >= threshold."""
    data = probs.data if isinstance(probs, Tensor) else probs
    return data >= threshold
