"""Train several presets under one budget and tabulate them side by side."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .config import RunConfig, get_preset
from .train import load_splits, train


@dataclass
class LadderResult:
    rows: dict = field(default_factory=dict)  # preset -> MetricsReport
    log: list = field(default_factory=list)

    def deltas(self) -> list:
        """``(from, to, d_mean_iou, d_overall_iou, d_map)`` for consecutive presets and each against the first."""
        names = list(self.rows)
        pairs = list(zip(names, names[1:]))
        pairs += [(names[0], n) for n in names[2:]]
        out = []
        for a, b in pairs:
            ra, rb = self.rows[a], self.rows[b]
            out.append((a, b, rb.mean_iou - ra.mean_iou, rb.overall_iou - ra.overall_iou, rb.map_50_95 - ra.map_50_95))
        return out

    def render(self) -> str:
        names = list(self.rows)
        w = max(8, *(len(n) for n in names))
        lines = [f"{'preset':<{w}}  mean_iou  overall_iou  map_50_95", "-" * (w + 35)]
        for n, r in self.rows.items():
            lines.append(f"{n:<{w}}  {r.mean_iou:8.4f}  {r.overall_iou:11.4f}  {r.map_50_95:9.4f}")
        if len(names) > 1:
            lines += ["", f"{'delta':<{2 * w + 4}}  mean_iou  overall_iou  map_50_95"]
            for a, b, dm, do, dp in self.deltas():
                lines.append(f"{a + ' -> ' + b:<{2 * w + 4}}  {dm:+8.4f}  {do:+11.4f}  {dp:+9.4f}")
        lines.append("")
        for n, r in self.rows.items():
            lines += [f"{n}.{k} = {v!r}" for k, v in r.as_dict().items()]
        return "\n".join(lines) + "\n"


def run_ablation_ladder(cfg: RunConfig, presets, out_dir=None, echo=None, data=None) -> LadderResult:
    """Train every preset on the same data with the same seed and step budget."""
    data = data if data is not None else load_splits(cfg)
    result = LadderResult()
    for name in presets:
        abl = get_preset(name)
        sub = Path(out_dir) / name if out_dir is not None else None
        run = train(cfg, abl, sub, data=data, echo=echo)
        result.rows[name] = run.report
        result.log += run.log
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ladder.txt").write_text(result.render(), encoding="utf-8")
    return result


@dataclass
class SweepResult:
    """One ladder per training seed, all on the same dataset."""

    ladders: dict = field(default_factory=dict)  # seed -> LadderResult

    def mean(self, preset: str, metric: str = "mean_iou") -> float:
        vals = [getattr(lad.rows[preset], metric) for lad in self.ladders.values()]
        return sum(vals) / len(vals)

    def margins(self, better: str, base: str, metric: str = "mean_iou") -> dict:
        """Per-seed ``metric(better) - metric(base)``."""
        return {s: getattr(lad.rows[better], metric) - getattr(lad.rows[base], metric)
                for s, lad in self.ladders.items()}

    def render(self) -> str:
        seeds = list(self.ladders)
        presets = list(self.ladders[seeds[0]].rows)
        w = max(8, *(len(n) for n in presets))
        head = "".join(f"  seed {s:<5}" for s in seeds)
        lines = [f"{'preset':<{w}}{head}  mean", "-" * (w + 13 * len(seeds) + 10)]
        for n in presets:
            vals = "".join(f"  {self.ladders[s].rows[n].mean_iou:10.4f}" for s in seeds)
            lines.append(f"{n:<{w}}{vals}  {self.mean(n):.4f}")
        lines += ["", "mean_iou per seed; last column averages the seeds", ""]
        for s in seeds:
            lines += [f"seed{s}.{n}.mean_iou = {self.ladders[s].rows[n].mean_iou!r}" for n in presets]
        lines += [f"mean.{n}.mean_iou = {self.mean(n)!r}" for n in presets]
        return "\n".join(lines) + "\n"


def run_seed_sweep(cfg: RunConfig, presets, seeds, out_dir=None, echo=None) -> SweepResult:
    """Run the ladder once per training seed; the dataset stays fixed."""
    data = load_splits(cfg)
    sweep = SweepResult()
    for s in seeds:
        sub = Path(out_dir) / f"seed_{s}" if out_dir is not None else None
        sweep.ladders[s] = run_ablation_ladder(cfg.replace(seed=s), presets, sub, echo, data)
    if out_dir is not None:
        (Path(out_dir) / "sweep.txt").write_text(sweep.render(), encoding="utf-8")
    return sweep
