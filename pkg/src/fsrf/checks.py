"""Finite-difference gradient suite over every loss and a tiny end-to-end model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .data import MODALITIES, MissingPattern, mask_batch
from .distill import BranchInput, das_loss
from .encoders import FSRFModel, ModelConfig
from .losses import (
    LossConfig,
    js_divergence,
    noise_consistency_loss,
    noise_entropy_loss,
    ntxent_homo_het,
    sinkhorn_distance,
    task_loss,
    total_loss,
)

TOLERANCE = 1e-4
STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error <= self.tolerance


def _split3(x: Tensor) -> dict:
    """View a ``(3, B, d)`` tensor as one ``(B, d)`` batch per modality."""
    return {m: ad.take(x, i) for i, m in enumerate(MODALITIES)}


def _simplex(rng, b: int, k: int) -> np.ndarray:
    p = rng.uniform(0.2, 1.0, size=(b, k))
    return p / p.sum(axis=1, keepdims=True)


def loss_cases(rng: np.random.Generator, js: Callable = js_divergence) -> list[tuple[str, Callable, np.ndarray]]:
    b, d = 4, 5
    cfg = LossConfig()
    other = Tensor(rng.standard_normal((3, b, d)))
    q = Tensor(_simplex(rng, b, 3))
    labels_cls = np.array([0, 1, 2, 1])
    labels_reg = rng.standard_normal(b)
    y_cloud = Tensor(rng.standard_normal((3, 2)))

    def ntxent(x):
        return ntxent_homo_het(_split3(x), _split3(other), cfg.tau)

    def n1(x):
        return noise_consistency_loss(_split3(x), 0.5)

    def n2(x):
        return noise_entropy_loss(_split3(x), cfg.noise_mean, cfg.noise_var, cfg.ridge)

    def sink(x):
        return sinkhorn_distance(x, y_cloud, eps=0.5, max_iter=50, tol=0.0)

    def js_loss(x):
        return ad.mean(js(ad.softmax(x, axis=-1), q))

    def ce(x):
        return task_loss([ad.softmax(x, axis=-1)], labels_cls, "classification")

    def mse(x):
        return task_loss([x], labels_reg, "regression")

    def total(x):
        parts = [ad.sum_(ad.square(ad.take(x, i))) for i in range(3)]
        return total_loss(parts[0], parts[1], parts[2], 0.2, 0.1)

    return [
        ("homo_hetero_ntxent", ntxent, rng.standard_normal((3, b, d))),
        ("noise_consistency", n1, rng.standard_normal((3, b, d))),
        ("noise_entropy", n2, rng.standard_normal((3, b, d))),
        ("sinkhorn_unrolled", sink, rng.standard_normal((3, 2))),
        ("js_logits", js_loss, rng.standard_normal((b, 3))),
        ("task_cross_entropy", ce, rng.standard_normal((b, 3))),
        ("task_mse", mse, rng.standard_normal(b)),
        ("total_objective_weights", total, rng.standard_normal(3)),
    ]


def tiny_model_case(rng: np.random.Generator, mode: str = "classification"):
    """``(model, fn(name, tensor) -> loss)`` for a d_u=8, batch-4 model with two
    fixed masked views and every loss term active."""
    dims = {"L": (3, 4), "A": (3, 4), "V": (3, 4)}
    model = FSRFModel(ModelConfig(dims=dims, d_u=8, n_layers=1, n_heads=2, mode=mode, seed=5))
    # zero-initialised biases map an absent modality to the zero vector, where
    # cosine distance has a kink; check at a generic point instead
    for name, t in model.params.items():
        t.data = t.data + 0.1 * rng.standard_normal(t.shape)
    b = 4
    feats = {m: rng.standard_normal((b,) + dims[m]) for m in MODALITIES}
    masks = {m: np.ones((b, dims[m][0])) for m in MODALITIES}
    pats_p = [MissingPattern(0.3, frozenset("LA")), MissingPattern(), MissingPattern(0.0, frozenset("V")),
              MissingPattern(0.3)]
    pats_q = [MissingPattern(), MissingPattern(0.3, frozenset("AV")), MissingPattern(0.0, frozenset("LV")),
              MissingPattern(0.0, frozenset("L"))]
    fp, kp = mask_batch(feats, masks, pats_p, np.random.default_rng(1))
    fq, kq = mask_batch(feats, masks, pats_q, np.random.default_rng(2))
    targets = np.array([0.0, 1.0, 1.0, 0.0]) if mode == "classification" else rng.standard_normal(b)
    cfg = LossConfig(sinkhorn_max_iter=30, sinkhorn_tol=0.0, sinkhorn_eps=0.5)
    bp, bq = BranchInput(fp, kp), BranchInput(fq, kq)

    def fn(name: str, x: Tensor) -> Tensor:
        params = dict(model.params)
        params[name] = x
        return das_loss(FSRFModel(model.config, params), bp, bq, targets, cfg)[0]

    return model, fn


def end_to_end_error(rng: np.random.Generator, coords_per_param: int = 2, mode: str = "classification") -> float:
    model, fn = tiny_model_case(rng, mode)
    worst = 0.0
    for name in sorted(model.params):
        point = model.params[name].data
        coords = rng.choice(point.size, size=min(coords_per_param, point.size), replace=False)
        worst = max(worst, grad_check(lambda x, n=name: fn(n, x), point, STEP, coords=list(coords)))
    return worst


def run_suite(seed: int = 0, js: Callable = js_divergence, points: int = 3) -> list[CheckResult]:
    """Check every loss at ``points`` random inputs plus the end-to-end objective."""
    rng = np.random.default_rng(seed)
    worst = {}
    for _ in range(points):
        for name, fn, x in loss_cases(rng, js):
            worst[name] = max(worst.get(name, 0.0), grad_check(fn, x, STEP))
    results = [CheckResult(n, e) for n, e in worst.items()]
    results.append(CheckResult("end_to_end_classification", end_to_end_error(rng)))
    results.append(CheckResult("end_to_end_regression", end_to_end_error(rng, mode="regression")))
    return results


def sign_flipped_js(p, q) -> Tensor:
    """JS divergence whose backward pass has the wrong sign (mutation fixture)."""
    p = ad.as_tensor(p)
    q = np.asarray(ad.as_tensor(q).data)
    value = js_divergence(p.data, q).data
    grad_p = 0.5 * np.log(p.data / (0.5 * (p.data + q)))

    def bwd(gout):
        return (-np.asarray(gout)[..., None] * grad_p,)

    return ad.make_op(value, (p,), bwd)
