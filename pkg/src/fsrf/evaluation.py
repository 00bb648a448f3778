"""Metrics and the two missingness test protocols.

The inter-modality grid evaluates every non-empty modality subset; the
intra-modality curve drops frames from all three modalities at ratio ``p``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    FULL_SET,
    INCOMPLETE_SETS,
    MODALITIES,
    Dataset,
    MissingPattern,
    condition_name,
    mask_batch,
)
from .distill import eval_forward
from .encoders import FSRFModel

GRID_SETS = INCOMPLETE_SETS + (FULL_SET,)
GRID_CONDITIONS = tuple(condition_name(s) for s in GRID_SETS)
MISSING_CONDITIONS = GRID_CONDITIONS[:6]
DEFAULT_RATIOS = tuple(round(0.1 * i, 1) for i in range(1, 11))
CURVE_DRAWS = 5
EVAL_CHUNK = 512


def binary_f1(predictions, labels) -> float:
    """F1 of the positive class; 0 when precision + recall is 0."""
    pred = np.asarray(predictions).astype(bool).reshape(-1)
    true = np.asarray(labels).astype(bool).reshape(-1)
    if pred.size == 0:
        raise ValueError("binary_f1 of empty input")
    if pred.shape != true.shape:
        raise ValueError("predictions and labels differ in length")
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def predict_positive(model: FSRFModel, feats: dict, masks: dict) -> np.ndarray:
    """Positive/negative decisions; regression scores are thresholded at 0."""
    n = feats["L"].shape[0]
    out = []
    for lo in range(0, n, EVAL_CHUNK):
        hi = min(n, lo + EVAL_CHUNK)
        branch = eval_forward(model, {m: feats[m][lo:hi] for m in MODALITIES},
                              {m: masks[m][lo:hi] for m in MODALITIES})
        if model.config.mode == "classification":
            out.append(np.argmax(branch.probs.data, axis=1) == 1)
        else:
            out.append(branch.pred.data > 0)
    return np.concatenate(out) if out else np.zeros(0, dtype=bool)


def inter_masked(feats: dict, masks: dict, available) -> tuple[dict, dict]:
    f = {m: feats[m] if m in available else np.zeros_like(feats[m]) for m in MODALITIES}
    k = {m: masks[m] if m in available else np.zeros_like(masks[m]) for m in MODALITIES}
    return f, k


def eval_inter_grid(model: FSRFModel, dataset: Dataset) -> dict[str, float]:
    """F1 for each of the 7 available-modality conditions, keyed like ``"{l,a}"``."""
    feats, masks, _ = dataset.arrays()
    labels = dataset.binary_labels()
    result = {}
    for name, avail in zip(GRID_CONDITIONS, GRID_SETS):
        f, k = inter_masked(feats, masks, avail)
        result[name] = binary_f1(predict_positive(model, f, k), labels)
    return result


def avg_missing(grid: dict[str, float]) -> float:
    return float(np.mean([grid[c] for c in MISSING_CONDITIONS]))


def eval_intra_curve(
    model: FSRFModel,
    dataset: Dataset,
    ratios=DEFAULT_RATIOS,
    draws: int = CURVE_DRAWS,
    seed: int = 0,
) -> dict[float, float]:
    """Mean F1 over ``draws`` seeded frame-drop draws at each ratio."""
    feats, masks, _ = dataset.arrays()
    labels = dataset.binary_labels()
    curve = {}
    for p in ratios:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"ratio {p} outside [0, 1]")
        pattern = MissingPattern(intra_ratio=float(p))
        scores = []
        for d in range(draws):
            rng = np.random.default_rng([seed, d, int(round(p * 1000))])
            f, k = mask_batch(feats, masks, [pattern] * len(dataset), rng)
            scores.append(binary_f1(predict_positive(model, f, k), labels))
        curve[float(p)] = float(np.mean(scores))
    return curve


def constant_prediction_f1(labels, positive: bool) -> float:
    labels = np.asarray(labels)
    return binary_f1(np.full(labels.shape, positive), labels)


@dataclass
class RunReport:
    grid: dict
    avg_missing: float
    intra_curve: dict
    seeds: list
    config_hash: str = ""
    grid_std: dict = field(default_factory=dict)
    avg_missing_std: float = 0.0
    intra_curve_std: dict = field(default_factory=dict)
    variant: str = "full"

    def __post_init__(self):
        recomputed = avg_missing(self.grid)
        if abs(recomputed - self.avg_missing) > 1e-12:
            raise ValueError("avg_missing inconsistent with the six incomplete conditions")
        values = list(self.grid.values()) + list(self.intra_curve.values())
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("F1 values must lie in [0, 1]")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["intra_curve"] = {f"{k:.1f}": v for k, v in self.intra_curve.items()}
        out["intra_curve_std"] = {f"{k:.1f}": v for k, v in self.intra_curve_std.items()}
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> RunReport:
        raw = dict(raw)
        raw["intra_curve"] = {float(k): v for k, v in raw.get("intra_curve", {}).items()}
        raw["intra_curve_std"] = {float(k): v for k, v in raw.get("intra_curve_std", {}).items()}
        return cls(**raw)

    def write(self, out_dir, stem: str = "report") -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"{stem}.json", out / f"{stem}_grid.csv", out / f"{stem}_curve.csv"]
        paths[0].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        with open(paths[1], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["condition", "f1", "f1_std"])
            for c in GRID_CONDITIONS:
                w.writerow([c, repr(self.grid[c]), repr(self.grid_std.get(c, 0.0))])
            w.writerow(["avg_missing", repr(self.avg_missing), repr(self.avg_missing_std)])
        with open(paths[2], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ratio", "f1", "f1_std"])
            for p, v in sorted(self.intra_curve.items()):
                w.writerow([f"{p:.1f}", repr(v), repr(self.intra_curve_std.get(p, 0.0))])
        return paths


def build_report(model: FSRFModel, test: Dataset, seeds=(0,), config_hash: str = "",
                 ratios=DEFAULT_RATIOS, variant: str = "full") -> RunReport:
    grid = eval_inter_grid(model, test)
    curve = eval_intra_curve(model, test, ratios)
    return RunReport(grid, avg_missing(grid), curve, list(seeds), config_hash, variant=variant)


def dump_embeddings(model: FSRFModel, dataset: Dataset, path) -> Path:
    """Write one row per sample: joint representation ``z0..z{d_u-1}`` and label."""
    feats, masks, labels = dataset.arrays()
    zs = []
    for lo in range(0, len(dataset), EVAL_CHUNK):
        hi = min(len(dataset), lo + EVAL_CHUNK)
        out = eval_forward(model, {m: feats[m][lo:hi] for m in MODALITIES},
                           {m: masks[m][lo:hi] for m in MODALITIES})
        zs.append(out.z.data)
    z = np.concatenate(zs) if zs else np.zeros((0, model.config.d_u))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"z{i}" for i in range(model.config.d_u)] + ["label"])
        for row, label in zip(z, labels):
            w.writerow([repr(float(v)) for v in row] + [repr(float(label))])
    return path
