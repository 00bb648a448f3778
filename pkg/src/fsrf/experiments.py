"""Seed sweeps and the three-variant ablation."""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Dataset, split_dataset
from .distill import VARIANTS
from .evaluation import DEFAULT_RATIOS, GRID_CONDITIONS, RunReport, avg_missing, build_report
from .training import TrainConfig, train

log = logging.getLogger(__name__)


class ExperimentError(RuntimeError):
    """A seed run failed; ``partial`` holds the reports finished before it."""

    def __init__(self, message: str, partial: dict):
        super().__init__(message)
        self.partial = partial


def aggregate(reports: list[RunReport], seeds, config_hash: str = "", variant: str = "full") -> RunReport:
    """Mean and population standard deviation of every metric across runs."""
    grid = {c: float(np.mean([r.grid[c] for r in reports])) for c in GRID_CONDITIONS}
    grid_std = {c: float(np.std([r.grid[c] for r in reports])) for c in GRID_CONDITIONS}
    ratios = sorted(reports[0].intra_curve)
    curve = {p: float(np.mean([r.intra_curve[p] for r in reports])) for p in ratios}
    curve_std = {p: float(np.std([r.intra_curve[p] for r in reports])) for p in ratios}
    am = [r.avg_missing for r in reports]
    return RunReport(
        grid=grid, avg_missing=avg_missing(grid), intra_curve=curve, seeds=list(seeds),
        config_hash=config_hash, grid_std=grid_std, avg_missing_std=float(np.std(am)),
        intra_curve_std=curve_std, variant=variant,
    )


def multi_seed(runner: Callable[[int], RunReport], seeds, partial_path=None,
               config_hash: str = "", variant: str = "full") -> tuple[RunReport, dict]:
    """Run ``runner(seed)`` for each seed and aggregate.

    Returns the aggregate and the per-seed reports. If a run raises, the
    finished reports are written to ``partial_path`` (when given) and an
    ``ExperimentError`` carrying them is raised.
    """
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("multi_seed needs at least 2 seeds")
    if len(set(seeds)) != len(seeds):
        raise ValueError("duplicate seeds")
    done = {}
    for s in seeds:
        try:
            done[s] = runner(s)
        except Exception as exc:
            partial = {str(k): r.to_dict() for k, r in done.items()}
            if partial_path is not None:
                path = Path(partial_path)
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(json.dumps({"failed_seed": s, "error": str(exc), "completed": partial},
                                           indent=2, sort_keys=True))
            raise ExperimentError(f"seed {s} failed: {exc}", done) from exc
        log.info("seed %d: avg_missing=%.4f", s, done[s].avg_missing)
    return aggregate([done[s] for s in seeds], seeds, config_hash, variant), done


def seed_runner(dataset: Dataset, config: TrainConfig, ratios=DEFAULT_RATIOS,
                checkpoint_root=None) -> Callable[[int], RunReport]:
    """Runner that splits ``dataset`` per the config, trains with the given seed
    and reports on the test split."""
    tr, va, te = split_dataset(dataset, config.split, config.split_seed)

    def run(seed: int) -> RunReport:
        cfg = dataclasses.replace(config, seed=seed)
        ckpt = None if checkpoint_root is None else Path(checkpoint_root) / f"{cfg.variant}_seed{seed}"
        res = train(tr, va, cfg, checkpoint_dir=ckpt)
        return build_report(res.model, te, [seed], cfg.hash(), ratios, variant=cfg.variant)

    return run


def ablate(variant: str, dataset: Dataset, config: TrainConfig, seeds=(0, 1, 2, 3, 4),
           ratios=DEFAULT_RATIOS, partial_path=None) -> RunReport:
    """Train and evaluate one ablation variant over ``seeds``; everything else
    about the pipeline is taken from ``config``."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    cfg = dataclasses.replace(config, variant=variant)
    runner = seed_runner(dataset, cfg, ratios)
    seeds = list(seeds)
    if len(seeds) == 1:
        report = runner(seeds[0])
        return report
    report, _ = multi_seed(runner, seeds, partial_path, cfg.hash(), variant)
    return report


def ablation_table(reports: dict[str, RunReport]) -> list[dict]:
    """Rows of per-condition F1 for each variant plus its difference to ``full``."""
    base = reports.get("full")
    rows = []
    for v, r in reports.items():
        row = {"variant": v, **{c: r.grid[c] for c in GRID_CONDITIONS}, "avg_missing": r.avg_missing}
        if base is not None:
            row["delta_vs_full"] = r.avg_missing - base.avg_missing
        rows.append(row)
    return rows
