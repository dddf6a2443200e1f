"""Training loop, optimisers, checkpointing and evaluation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import AblationConfig, RunConfig, config_from_meta, get_preset
from .errors import ConfigError, NumericalError
from .fileio import load_checkpoint, read_dataset, save_checkpoint
from .metrics import MetricsReport, frame_counts
from .model import SegModel
from .world import make_dataset

VAL_SEED_OFFSET = 1_000_000  # validation clips come from a seed range training never touches
CHECKPOINT_NAME = "model.ckpt"
LOG_NAME = "train.log"


# ---------------------------------------------------------------------------
# Optimisers
# ---------------------------------------------------------------------------
class Sgd:
    """Heavy-ball momentum SGD with optional L2 weight decay."""

    def __init__(self, params: list, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params, self.momentum, self.weight_decay = params, momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            g = p.grad if self.weight_decay == 0 else p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v


class Adam:
    def __init__(self, params: list, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1, c2 = 1 - self.beta1 ** self.t, 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if self.weight_decay == 0 else p.grad + self.weight_decay * p.data
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: RunConfig, params: list):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.momentum, cfg.beta2, weight_decay=cfg.weight_decay)
    return Sgd(params, cfg.momentum, cfg.weight_decay)


def learning_rate(cfg: RunConfig, step: int) -> float:
    """Linear warm-up followed by cosine decay to zero at ``cfg.steps``."""
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(1, cfg.steps - cfg.warmup_steps)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * (step - cfg.warmup_steps) / span))


def clip_gradients(params: list, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most `max_norm`; return the norm before."""
    norm = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad = p.grad * scale
    return norm


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------
def load_splits(cfg: RunConfig) -> tuple:
    """(train, val) clip lists, read from disk when paths are set, generated otherwise."""
    if cfg.data_dir:
        train = read_dataset(cfg.data_dir)
    else:
        train = make_dataset(cfg.data_preset, cfg.train_clips, cfg.data_seed, cfg.canvas, cfg.canvas, cfg.frames, cfg.noise)
    if cfg.val_dir:
        val = read_dataset(cfg.val_dir)
    else:
        val = make_dataset(cfg.data_preset, cfg.val_clips, cfg.data_seed + VAL_SEED_OFFSET, cfg.canvas, cfg.canvas,
                           cfg.frames, cfg.noise)
    return train, val


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------
def evaluate_model(model: SegModel, clips: list) -> tuple:
    """Return ``(MetricsReport, rows)``; rows are ``(clip, frame, intersection, union)``."""
    rows = []
    with ad.no_grad():
        for clip in clips:
            pred = model.predict(clip)
            for t in range(pred.shape[0]):
                rows.append((clip.name, t) + frame_counts(pred[t], clip.gt_masks[t]))
    return MetricsReport.from_counts([r[2:] for r in rows]), rows


def format_frame_dump(rows: list) -> str:
    lines = ["# clip frame intersection union iou"]
    for name, t, i, u in rows:
        lines.append(f"{name} {t} {i} {u} {1.0 if u == 0 else i / u!r}")
    return "\n".join(lines) + "\n"


def model_from_checkpoint(path) -> SegModel:
    tensors, meta = load_checkpoint(path)
    if "ablation" not in meta:
        raise ConfigError(f"{path}: checkpoint metadata lacks an ablation preset")
    model = SegModel(config_from_meta(meta), get_preset(meta["ablation"]))
    model.load_state(tensors)
    return model


def evaluate(checkpoint, clips, report_path=None, model: SegModel | None = None) -> MetricsReport:
    """Evaluate a checkpoint on `clips` (a list or a dataset directory).

    Writes the rendered report to `report_path` and the per-frame counts next
    to it (``<report>.frames.txt``).  The checkpoint file is only read.
    """
    if model is None:
        model = model_from_checkpoint(checkpoint)
    if not isinstance(clips, list):
        clips = read_dataset(clips)
    report, rows = evaluate_model(model, clips)
    if report_path is not None:
        report_path = Path(report_path)
        report_path.parent.mkdir(parents=True, exist_ok=True)
        report_path.write_text(report.render(), encoding="utf-8")
        Path(str(report_path) + ".frames.txt").write_text(format_frame_dump(rows), encoding="utf-8")
    return report


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------
@dataclass
class TrainResult:
    model: SegModel
    log: list = field(default_factory=list)
    losses: list = field(default_factory=list)  # total loss per step
    report: MetricsReport | None = None
    checkpoint: Path | None = None


def checkpoint_meta(cfg: RunConfig, abl: AblationConfig, step: int) -> dict:
    meta = dict(cfg.to_lines())
    meta["ablation"] = abl.name
    meta["step"] = step
    return meta


def _fmt(parts: dict) -> str:
    return " ".join(f"{k} {v:.6f}" for k, v in parts.items())


def train(cfg: RunConfig, abl: AblationConfig, out_dir=None, data: tuple | None = None, echo=None) -> TrainResult:
    """Train one preset; deterministic given ``cfg.seed`` and the data.

    Writes ``train.log``, ``model.ckpt`` and (when validation runs)
    ``val_report.txt`` under `out_dir`.  A non-finite loss or gradient raises
    :class:`NumericalError` after writing ``nan_dump.txt``.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    train_clips, val_clips = data if data is not None else load_splits(cfg)
    if not train_clips:
        raise ConfigError("training set is empty")
    model = SegModel(cfg, abl)
    params = list(model.params.values())
    opt = make_optimizer(cfg, params)
    result = TrainResult(model)

    def emit(line: str) -> None:
        result.log.append(line)
        if echo is not None:
            echo(line)

    emit(f"preset {abl.name} seed {cfg.seed} params {model.store.count()} clips {len(train_clips)}")
    n = len(train_clips)
    order = None
    for step in range(cfg.steps):
        epoch, pos = divmod(step, n)
        if pos == 0:
            order = epoch_order(cfg.seed, epoch, n)
        idx = int(order[pos])
        clip = train_clips[idx]
        for p in params:
            p.grad = None
        total, parts = model.loss(clip, rng=np.random.default_rng([cfg.seed, step]))
        if not math.isfinite(parts["total"]):
            _abort(out, step, idx, clip, parts, "loss")
        ad.backward(total)
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        gnorm = clip_gradients(params, cfg.grad_clip)
        if not math.isfinite(gnorm):
            _abort(out, step, idx, clip, parts, "gradient")
        lr = learning_rate(cfg, step)
        opt.step(lr)
        result.losses.append(parts["total"])
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            emit(f"step {step} batch {idx} lr {lr:.6f} gnorm {gnorm:.4f} {_fmt(parts)}")
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0 and step + 1 < cfg.steps and val_clips:
            rep, _ = evaluate_model(model, val_clips)
            emit(f"val step {step + 1} mean_iou {rep.mean_iou:.6f} overall_iou {rep.overall_iou:.6f} "
                 f"map_50_95 {rep.map_50_95:.6f}")
    if val_clips:
        rep, rows = evaluate_model(model, val_clips)
        result.report = rep
        emit(f"val step {cfg.steps} mean_iou {rep.mean_iou:.6f} overall_iou {rep.overall_iou:.6f} "
             f"map_50_95 {rep.map_50_95:.6f}")
        if out is not None:
            (out / "val_report.txt").write_text(rep.render(), encoding="utf-8")
            (out / "val_report.txt.frames.txt").write_text(format_frame_dump(rows), encoding="utf-8")
    if out is not None:
        result.checkpoint = out / CHECKPOINT_NAME
        save_checkpoint(result.checkpoint, model.state(), checkpoint_meta(cfg, abl, cfg.steps))
        (out / LOG_NAME).write_text("\n".join(result.log) + "\n", encoding="utf-8")
    return result


def _abort(out, step: int, idx: int, clip, parts: dict, what: str):
    msg = f"non-finite {what} at step {step}, batch id {idx} ({clip.name}): {parts}"
    if out is not None:
        dump = [msg, f"words = {' '.join(clip.words)}", f"token_ids = {clip.token_ids}",
                f"frames_min_max = {clip.frames.min()} {clip.frames.max()}",
                f"flow_abs_max = {np.abs(clip.flows).max()}", f"mask_area = {clip.gt_masks.sum(axis=(1, 2)).tolist()}"]
        (out / "nan_dump.txt").write_text("\n".join(dump) + "\n", encoding="utf-8")
    raise NumericalError(msg)
