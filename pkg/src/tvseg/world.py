"""Procedural moving-shapes clips with exact masks, analytic flow and templated text."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SpecError, VocabularyError

VOCAB = [
    "[PAD]", "[CLS]", "[SEP]", "the", "a", "object", "that", "is", "moving", "staying", "still",
    "red", "green", "blue", "yellow", "magenta", "cyan", "white",
    "square", "disk", "left", "right", "up", "down",
]
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID, CLS_ID, SEP_ID = 0, 1, 2

COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.20, 0.30, 0.95),
    "yellow": (0.95, 0.90, 0.15),
    "magenta": (0.90, 0.20, 0.85),
    "cyan": (0.15, 0.85, 0.90),
    "white": (0.95, 0.95, 0.95),
}
SHAPES = ("square", "disk")
DIRECTIONS = {"right": (1, 0), "left": (-1, 0), "down": (0, 1), "up": (0, -1)}
BACKGROUND = 0.1


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: int
    start: tuple  # (x, y) of the top-left corner, pixels
    velocity: tuple  # (u, v) pixels per frame, integers
    is_target: bool = False

    def position(self, t: int) -> tuple:
        return self.start[0] + self.velocity[0] * t, self.start[1] + self.velocity[1] * t

    def occupancy(self, t: int, height: int, width: int) -> np.ndarray:
        x0, y0 = self.position(t)
        yy, xx = np.mgrid[0:height, 0:width]
        if self.shape == "square":
            return (xx >= x0) & (xx < x0 + self.size) & (yy >= y0) & (yy < y0 + self.size)
        r = self.size / 2.0
        cx, cy = x0 + r, y0 + r
        return (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple
    height: int = 64
    width: int = 64
    frames: int = 3
    noise: float = 0.03

    def __post_init__(self):
        if self.frames < 1:
            raise SpecError("a clip needs at least one frame")
        if sum(o.is_target for o in self.objects) != 1:
            raise SpecError("a scene needs exactly one target object")
        for o in self.objects:
            if o.shape not in SHAPES or o.color not in COLORS:
                raise SpecError(f"unknown shape/color {o.shape}/{o.color}")
            if o.size < 1:
                raise SpecError("object size must be positive")
            for t in range(self.frames):
                x, y = o.position(t)
                if x < 0 or y < 0 or x + o.size > self.width or y + o.size > self.height:
                    raise SpecError(f"{o.color} {o.shape} leaves the {self.width}x{self.height} canvas at frame {t}")

    @property
    def target(self) -> SceneObject:
        return next(o for o in self.objects if o.is_target)


@dataclass
class ClipSample:
    frames: np.ndarray  # [T, 3, H, W] in [0, 1], multiples of 1/255
    flows: np.ndarray  # [T, 2, H, W] (u, v) pixels per frame
    words: list  # sentence without special tokens
    gt_masks: np.ndarray  # [T, H, W] bool
    name: str = ""
    token_ids: list = field(init=False)

    def __post_init__(self):
        self.token_ids = tokenize(self.words)


def motion_words(velocity: tuple) -> list:
    u, v = velocity
    if u == 0 and v == 0:
        return ["staying", "still"]
    if abs(u) >= abs(v):
        return ["moving", "right" if u > 0 else "left"]
    return ["moving", "down" if v > 0 else "up"]


def describe(obj: SceneObject) -> list:
    return ["the", obj.color, obj.shape] + motion_words(obj.velocity)


def tokenize(words: list) -> list:
    """``[CLS] words... [SEP]`` as ids."""
    try:
        return [CLS_ID] + [WORD_TO_ID[w] for w in words] + [SEP_ID]
    except KeyError as e:
        raise VocabularyError(f"word {e.args[0]!r} is not in the vocabulary") from None


def generate_clip(spec: SceneSpec, seed: int, name: str = "") -> ClipSample:
    """Render a clip deterministically from (spec, seed).

    Objects are painted in order with the target last, so the target is never
    occluded.  Flow at frame t is the velocity of the pixel's owning object
    from t to t+1, zero on background.
    """
    rng = np.random.default_rng(seed)
    h, w, n_t = spec.height, spec.width, spec.frames
    order = [o for o in spec.objects if not o.is_target] + [spec.target]
    frames = np.empty((n_t, 3, h, w))
    flows = np.zeros((n_t, 2, h, w))
    masks = np.zeros((n_t, h, w), dtype=bool)
    for t in range(n_t):
        img = np.full((3, h, w), BACKGROUND)
        for o in order:
            occ = o.occupancy(t, h, w)
            img[:, occ] = np.asarray(COLORS[o.color])[:, None]
            flows[t, 0][occ] = o.velocity[0]
            flows[t, 1][occ] = o.velocity[1]
            if o.is_target:
                masks[t] = occ
        if spec.noise > 0:
            img = img + rng.normal(0.0, spec.noise, img.shape)
        frames[t] = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return ClipSample(frames, flows, describe(spec.target), masks, name)


def _random_velocity(rng: np.random.Generator, direction: str | None, max_speed: int) -> tuple:
    if direction is None:
        return (0, 0)
    du, dv = DIRECTIONS[direction]
    s = int(rng.integers(1, max_speed + 1))
    return (du * s, dv * s)


def _place(rng, size, velocity, frames, height, width):
    xs = [velocity[0] * t for t in range(frames)]
    ys = [velocity[1] * t for t in range(frames)]
    x_lo, x_hi = -min(xs), width - size - max(xs)
    y_lo, y_hi = -min(ys), height - size - max(ys)
    if x_hi < x_lo or y_hi < y_lo:
        raise SpecError("object too large or fast for the canvas")
    return int(rng.integers(x_lo, x_hi + 1)), int(rng.integers(y_lo, y_hi + 1))


def _boxes_apart(a: SceneObject, b: SceneObject, frames: int, margin: int = 2) -> bool:
    for t in range(frames):
        (ax, ay), (bx, by) = a.position(t), b.position(t)
        if not (ax + a.size + margin <= bx or bx + b.size + margin <= ax or
                ay + a.size + margin <= by or by + b.size + margin <= ay):
            return False
    return True


def random_scene(preset: str, rng: np.random.Generator, height: int = 64, width: int = 64, frames: int = 3,
                 noise: float = 0.03, size_range=None, max_speed: int = 3) -> SceneSpec:
    """Sample a scene.

    ``easy``: a single target of random appearance and motion.
    ``motion-necessity``: target plus an appearance-identical distractor with a
    different motion, so only the motion words identify the target.
    Object sizes default to 10..18 pixels on a 64-pixel canvas, scaled with
    the smaller canvas side.
    """
    if size_range is None:
        scale = min(height, width) / 64.0
        size_range = (max(2, round(10 * scale)), max(3, round(18 * scale)))
    size = int(rng.integers(size_range[0], size_range[1] + 1))
    color = str(rng.choice(list(COLORS)))
    shape = str(rng.choice(SHAPES))
    dirs = list(DIRECTIONS) + [None]
    if preset == "easy":
        d = dirs[int(rng.integers(len(dirs)))]
        vel = _random_velocity(rng, d, max_speed)
        obj = SceneObject(shape, color, size, _place(rng, size, vel, frames, height, width), vel, True)
        return SceneSpec((obj,), height, width, frames, noise)
    if preset == "motion-necessity":
        for _ in range(1000):
            i, j = rng.choice(len(dirs), size=2, replace=False)
            v_t = _random_velocity(rng, dirs[int(i)], max_speed)
            v_d = _random_velocity(rng, dirs[int(j)], max_speed)
            tgt = SceneObject(shape, color, size, _place(rng, size, v_t, frames, height, width), v_t, True)
            dis = SceneObject(shape, color, size, _place(rng, size, v_d, frames, height, width), v_d, False)
            if _boxes_apart(tgt, dis, frames):
                objs = (tgt, dis) if rng.random() < 0.5 else (dis, tgt)
                return SceneSpec(objs, height, width, frames, noise)
        raise SpecError("could not place two separated objects")
    raise SpecError(f"unknown dataset preset {preset!r}")


def make_dataset(preset: str, n_clips: int, seed: int, height: int = 64, width: int = 64,
                 frames: int = 3, noise: float = 0.03) -> list:
    """`n_clips` clips; clip k depends only on (preset, seed, k)."""
    clips = []
    for k in range(n_clips):
        rng = np.random.default_rng([seed, k])
        spec = random_scene(preset, rng, height, width, frames, noise)
        clips.append(generate_clip(spec, int(rng.integers(2**31)), name=f"clip_{k:05d}"))
    return clips


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def flow_color_preview(flow: np.ndarray) -> np.ndarray:
    """``[2, H, W]`` flow -> ``[3, H, W]`` RGB: angle sets hue, relative magnitude saturation."""
    u, v = flow[0], flow[1]
    mag = np.hypot(u, v)
    peak = mag.max()
    sat = mag / peak if peak > 0 else np.zeros_like(mag)
    hue = np.mod(np.arctan2(v, u), 2 * np.pi) / (2 * np.pi)
    return hsv_to_rgb(hue, sat, np.ones_like(mag))
