"""Run configuration, config-file parsing and ablation presets."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunConfig:
    seed: int = 0
    # model dimensions
    frames: int = 3
    canvas: int = 64
    channels: int = 64
    embed_dim: int = 32
    heads: int = 4
    layers: int = 4
    mlp_ratio: int = 2
    text_len: int = 12
    text_embed: int = 32
    enc_widths: tuple = (16, 32, 32, 32)
    aspp_dilations: tuple = (1, 2, 4)
    # optimisation
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    grad_clip: float = 5.0
    warmup_steps: int = 0
    steps: int = 2000
    # losses
    align_weight: float = 0.1
    align_reduction: str = "mean"
    align_pairs: int = 256
    aux_bce_weight: float = 0.1
    # data
    data_preset: str = "easy"
    data_seed: int = 0
    train_clips: int = 512
    val_clips: int = 64
    noise: float = 0.03
    data_dir: str = ""
    val_dir: str = ""
    eval_every: int = 200
    log_every: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("frames", "canvas", "channels", "embed_dim", "heads", "layers", "mlp_ratio", "text_len",
                     "text_embed", "train_clips", "val_clips", "align_pairs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.steps < 0 or self.eval_every < 0 or self.log_every < 1:
            raise ConfigError("steps and eval_every must be >= 0, log_every >= 1")
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.canvas % 8:
            raise ConfigError("canvas must be divisible by 8")
        if len(self.enc_widths) != 4:
            raise ConfigError("enc_widths needs four stage widths")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.align_reduction not in ("mean", "sum"):
            raise ConfigError(f"align_reduction must be mean or sum, got {self.align_reduction!r}")
        if self.data_preset not in ("easy", "motion-necessity"):
            raise ConfigError(f"unknown data_preset {self.data_preset!r}")

    def to_lines(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(str(x) for x in v) if isinstance(v, tuple) else v
        return out

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _coerce(name: str, raw: str, default):
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    base = base or RunConfig()
    defaults = {f.name: getattr(base, f.name) for f in dataclasses.fields(base)}
    values = dict(defaults)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, defaults[key])
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def config_from_meta(meta: dict) -> RunConfig:
    keys = {f.name for f in dataclasses.fields(RunConfig)}
    return parse_config("\n".join(f"{k} = {v}" for k, v in meta.items() if k in keys))


@dataclass(frozen=True)
class AblationConfig:
    name: str = "B+M+T+L+A"
    motion: bool = True
    mmvt: bool = True
    lgff: bool = True
    align: bool = True
    cma_only: bool = False
    cat_plus_ta: bool = False
    cat_decoder: bool = False
    aux_bce: bool = False
    l2am_only: bool = False

    def flags(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "name"}

    @property
    def align_terms(self) -> tuple:
        if not self.align:
            return ()
        if self.l2am_only:
            return ("al", "ml")
        return ("al", "ml", "am") if self.motion else ("al",)


def _preset(name, **flags) -> AblationConfig:
    base = dict(motion=False, mmvt=False, lgff=False, align=False)
    base.update(flags)
    return AblationConfig(name=name, **base)


PRESETS = {p.name: p for p in [
    _preset("B"),
    _preset("B+M", motion=True),
    _preset("B+T", mmvt=True),
    _preset("B+M+T", motion=True, mmvt=True),
    _preset("B+T+L", mmvt=True, lgff=True),
    _preset("B+M+T+L", motion=True, mmvt=True, lgff=True),
    _preset("B+M+T+L+A", motion=True, mmvt=True, lgff=True, align=True),
    _preset("+CMA", motion=True, mmvt=True, cma_only=True),
    _preset("+CAT+TA", motion=True, mmvt=True, cat_plus_ta=True),
    _preset("CAT", motion=True, mmvt=True, cat_decoder=True),
    _preset("+bce", motion=True, mmvt=True, lgff=True, aux_bce=True),
    _preset("+l2am", motion=True, mmvt=True, lgff=True, align=True, l2am_only=True),
]}

LADDER = ("B", "B+M", "B+M+T", "B+M+T+L", "B+M+T+L+A")


def get_preset(name: str) -> AblationConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown ablation preset {name!r}; choose from {', '.join(PRESETS)}") from None
