"""Ablation grids over teachers, strategies and spectral-loss levels.

Every trained model is described by a :class:`Recipe` (learner scale plus,
recursively, the recipe of its teacher). An :class:`Experiment` trains each
recipe once per seed and can persist results to a cache directory, so the
grids share their common runs (one senior per seed, and so on).
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .distill import (DEFAULT_LR0, MetricsLog, StageConfig, distill_stage, load_detector, mse_loss,
                      save_detector, spectral_loss, train_scratch)
from .losses import DistillLossConfig
from .models import Detector, Scale
from .synthdata import Dataset, in_memory_dataset

log = logging.getLogger(__name__)

_TRAINING_MODULES = ("tensor.py", "spectral.py", "losses.py", "models.py", "optim.py", "distill.py",
                     "synthdata.py", "metrics.py")


def training_code_digest() -> str:
    h = hashlib.sha256()
    root = Path(__file__).parent
    for name in _TRAINING_MODULES:
        h.update((root / name).read_bytes())
    return h.hexdigest()[:12]


@dataclass(frozen=True)
class Recipe:
    scale: Scale
    teacher: "Recipe | None" = None
    loss: DistillLossConfig | None = None
    batch_size: int = 32

    def key(self) -> str:
        if self.teacher is None:
            return f"{self.scale.value}/b{self.batch_size}"
        layers = "".join("1" if v else "0" for v in self.loss.layers)
        return (f"{self.scale.value}/b{self.batch_size}/{self.loss.kind.value}{layers}"
                f"/kd{self.loss.lambda_kd:g}/amp{self.loss.lambda_amp:g}/norm{int(self.loss.normalize)}"
                f"<[{self.teacher.key()}]")


def scratch(scale: Scale) -> Recipe:
    return Recipe(Scale(scale))


def taught(scale: Scale, teacher: Recipe, loss: DistillLossConfig, batch_size: int = 32) -> Recipe:
    return Recipe(Scale(scale), teacher, loss, batch_size)


@dataclass
class AblationConfig:
    seeds: Sequence[int] = (0, 1, 2, 3, 4)
    epochs: int = 30
    lr0: float = DEFAULT_LR0
    batch_size: int = 32
    stage1_batch_size: int = 16
    n_train: int = 512
    n_test: int = 128
    lambda_kd: float = 1.0
    lambda_amp: float = 0.0
    cache_dir: str | None = None


def teacher_grid(cfg: AblationConfig) -> dict[str, Recipe]:
    mse = mse_loss(lambda_kd=cfg.lambda_kd)
    senior, junior = scratch(Scale.SENIOR), scratch(Scale.JUNIOR)
    junior_prog = taught(Scale.JUNIOR, senior, mse, cfg.stage1_batch_size)
    return {
        "none": scratch(Scale.TINY),
        "junior": taught(Scale.TINY, junior, mse, cfg.batch_size),
        "senior": taught(Scale.TINY, senior, mse, cfg.batch_size),
        "progressive": taught(Scale.TINY, junior_prog, mse, cfg.batch_size),
    }


def strategy_grid(cfg: AblationConfig) -> dict[str, Recipe]:
    mse = mse_loss(lambda_kd=cfg.lambda_kd)
    spec = spectral_loss(lambda_kd=cfg.lambda_kd, lambda_amp=cfg.lambda_amp)
    senior, junior = scratch(Scale.SENIOR), scratch(Scale.JUNIOR)
    return {
        "baseline": scratch(Scale.TINY),
        "spectral": taught(Scale.TINY, junior, spec, cfg.batch_size),
        "progressive": taught(Scale.TINY, taught(Scale.JUNIOR, senior, mse, cfg.stage1_batch_size), mse,
                              cfg.batch_size),
        "progressive+spectral": taught(Scale.TINY, taught(Scale.JUNIOR, senior, spec, cfg.stage1_batch_size),
                                       spec, cfg.batch_size),
    }


LAYER_SUBSETS = [s for k in (1, 2, 3) for s in combinations(range(3), k)]


def layer_label(subset: Sequence[int]) -> str:
    return "+".join(f"P{i + 3}" for i in subset)


def fft_layer_grid(cfg: AblationConfig) -> dict[str, Recipe]:
    """Spectral student stage over every non-empty level subset.

    The junior teacher is the progressive spectral one distilled on all
    levels, shared by every row.
    """
    spec_all = spectral_loss(lambda_kd=cfg.lambda_kd, lambda_amp=cfg.lambda_amp)
    junior = taught(Scale.JUNIOR, scratch(Scale.SENIOR), spec_all, cfg.stage1_batch_size)
    grid = {}
    for subset in LAYER_SUBSETS:
        layers = tuple(i in subset for i in range(3))
        loss = spectral_loss(layers, lambda_kd=cfg.lambda_kd, lambda_amp=cfg.lambda_amp)
        grid[layer_label(subset)] = taught(Scale.TINY, junior, loss, cfg.batch_size)
    return grid


GRIDS: dict[str, Callable[[AblationConfig], dict[str, Recipe]]] = {
    "teachers": teacher_grid,
    "strategies": strategy_grid,
    "fft-layers": fft_layer_grid,
}


@dataclass
class RunOutcome:
    model: Detector
    log: MetricsLog
    seconds: float = 0.0        # training time of this recipe alone, teachers excluded


class Experiment:
    """Trains recipes for one seed and dataset, memoised in memory and on disk."""

    def __init__(self, data: Dataset, seed: int, cfg: AblationConfig):
        self.data = data
        self.seed = seed
        self.cfg = cfg
        self._memo: dict[str, RunOutcome] = {}
        self.cache = Path(cfg.cache_dir) if cfg.cache_dir else None

    def _tag(self, recipe: Recipe) -> str:
        full = (f"{recipe.key()}|seed={self.seed}|epochs={self.cfg.epochs}|lr0={self.cfg.lr0!r}"
                f"|data={self.data.checksum}|code={training_code_digest()}")
        return hashlib.sha256(full.encode()).hexdigest()[:20]

    def stage_config(self, recipe: Recipe) -> StageConfig:
        return StageConfig(recipe.scale, None, recipe.loss or DistillLossConfig(lambda_kd=0.0),
                           self.cfg.epochs, recipe.batch_size, self.cfg.lr0, self.seed, True)

    def run(self, recipe: Recipe) -> RunOutcome:
        key = recipe.key()
        if key in self._memo:
            return self._memo[key]
        tag = self._tag(recipe)
        outcome = self._load_cached(tag)
        if outcome is None:
            log.info("seed %d: training %s", self.seed, key)
            cfg = self.stage_config(recipe)
            if recipe.teacher is None:
                res = train_scratch(recipe.scale, self.data, cfg)
            else:
                teacher = self.run(recipe.teacher).model
                res = distill_stage(cfg, self.data, teacher=teacher)
            outcome = RunOutcome(res.model, res.log, res.seconds)
            if self.cache is not None:
                self.cache.mkdir(parents=True, exist_ok=True)
                save_detector(self.cache / f"{tag}.ckpt", res.model)
                res.log.save(self.cache / f"{tag}.csv")
                (self.cache / f"{tag}.key").write_text(f"{key}\nseconds={res.seconds:.2f}\n")
        self._memo[key] = outcome
        return outcome

    def _load_cached(self, tag: str) -> RunOutcome | None:
        if self.cache is None:
            return None
        ckpt, metrics = self.cache / f"{tag}.ckpt", self.cache / f"{tag}.csv"
        if not (ckpt.exists() and metrics.exists()):
            return None
        seconds = 0.0
        meta = self.cache / f"{tag}.key"
        if meta.exists():
            for line in meta.read_text().splitlines():
                if line.startswith("seconds="):
                    seconds = float(line[len("seconds="):])
        return RunOutcome(load_detector(ckpt), MetricsLog.load(metrics), seconds)


def experiment_for_seed(seed: int, cfg: AblationConfig, data: Dataset | None = None) -> Experiment:
    """Use ``data`` when given, otherwise render a fresh in-memory dataset from ``seed``."""
    if data is None:
        data = in_memory_dataset(cfg.n_train, cfg.n_test, seed=seed)
    return Experiment(data, seed, cfg)


def grid_seconds(grid: str, cfg: AblationConfig, experiments: dict[int, "Experiment"]) -> float:
    """Training time of every distinct run a grid needs, summed over seeds.

    Teachers shared between rows are counted once per seed.
    """
    total = 0.0
    for seed in cfg.seeds:
        exp = experiments[seed]
        seen: set[str] = set()
        stack = list(GRIDS[grid](cfg).values())
        while stack:
            recipe = stack.pop()
            if recipe.key() in seen:
                continue
            seen.add(recipe.key())
            total += exp.run(recipe).seconds
            if recipe.teacher is not None:
                stack.append(recipe.teacher)
    return total


def run_grid(grid: str, cfg: AblationConfig, data: Dataset | None = None,
             experiments: dict[int, Experiment] | None = None) -> list[dict]:
    """One row per (strategy, seed) with final-epoch unseen-domain metrics."""
    if grid not in GRIDS:
        raise ValueError(f"unknown grid {grid!r}; choose from {sorted(GRIDS)}")
    recipes = GRIDS[grid](cfg)
    experiments = experiments if experiments is not None else {}
    rows = []
    for seed in cfg.seeds:
        exp = experiments.get(seed) or experiment_for_seed(seed, cfg, data)
        experiments[seed] = exp
        for label, recipe in recipes.items():
            final = exp.run(recipe).log.final
            rows.append({"grid": grid, "strategy": label, "seed": seed, "ap50": final.ap50,
                         "ap75": final.ap75, "map": final.map})
    return rows


def ablate_teachers(cfg: AblationConfig, data: Dataset | None = None, **kw) -> list[dict]:
    return run_grid("teachers", cfg, data, **kw)


def ablate_strategies(cfg: AblationConfig, data: Dataset | None = None, **kw) -> list[dict]:
    return run_grid("strategies", cfg, data, **kw)


def ablate_fft_layers(cfg: AblationConfig, data: Dataset | None = None, **kw) -> list[dict]:
    return run_grid("fft-layers", cfg, data, **kw)


ROW_FIELDS = ("grid", "strategy", "seed", "ap50", "ap75", "map")


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=ROW_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def summarize(rows: Sequence[dict]) -> list[dict]:
    """Mean, min and max of each metric per strategy, in first-seen order."""
    order: list[str] = []
    groups: dict[str, list[dict]] = {}
    for row in rows:
        if row["strategy"] not in groups:
            order.append(row["strategy"])
        groups.setdefault(row["strategy"], []).append(row)
    out = []
    for label in order:
        g = groups[label]
        entry = {"strategy": label, "seeds": len(g)}
        for metric in ("ap50", "ap75", "map"):
            vals = np.array([r[metric] for r in g])
            entry.update({f"{metric}_mean": float(vals.mean()), f"{metric}_min": float(vals.min()),
                          f"{metric}_max": float(vals.max())})
        out.append(entry)
    return out


def summary_to_csv(summary: Sequence[dict]) -> str:
    if not summary:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(summary[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(summary)
    return buf.getvalue()


def paired_wins(rows: Sequence[dict], better: str, worse: str, metric: str = "ap50") -> tuple[int, int]:
    """Seeds where ``better`` scores at least ``worse``; returns (wins, seeds)."""
    by = {(r["strategy"], r["seed"]): r[metric] for r in rows}
    seeds = sorted({r["seed"] for r in rows})
    wins = sum(by[(better, s)] >= by[(worse, s)] for s in seeds)
    return wins, len(seeds)


def epochs_to_fraction(log: MetricsLog, fraction: float = 0.9, metric: str = "map") -> int:
    """First epoch whose metric reaches ``fraction`` of the final value."""
    values = log.column(metric)
    target = fraction * values[-1]
    hits = np.nonzero(values >= target)[0]
    return int(hits[0]) if len(hits) else len(values) - 1


__all__ = [
    "AblationConfig", "Experiment", "GRIDS", "LAYER_SUBSETS", "Recipe", "ablate_fft_layers",
    "ablate_strategies", "ablate_teachers", "epochs_to_fraction", "experiment_for_seed", "fft_layer_grid",
    "grid_seconds",
    "layer_label", "paired_wins", "rows_to_csv", "run_grid", "scratch", "strategy_grid", "summarize",
    "summary_to_csv", "taught", "teacher_grid",
]
