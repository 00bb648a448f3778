"""Factorization, distillation and task losses.

Batched conventions: a representation batch is ``(B, d)``; per-modality
collections are dicts keyed by ``"L"``, ``"A"``, ``"V"``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from itertools import permutations

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalDomainError, Tensor
from .data import MODALITIES

LOG_2PI_E = math.log(2.0 * math.pi * math.e)
ORDERED_PAIRS = tuple(permutations(MODALITIES, 2))


@dataclass
class LossConfig:
    tau: float = 0.1
    margin: float = 1.0
    noise_mean: dict = field(default_factory=lambda: {m: 0.0 for m in MODALITIES})
    noise_var: dict = field(default_factory=lambda: {m: 1.0 for m in MODALITIES})
    sinkhorn_eps: float = 0.1
    sinkhorn_max_iter: int = 200
    sinkhorn_tol: float = 1e-6
    ridge: float = 1e-4
    lambda1: float = 0.2
    lambda2: float = 0.1

    def __post_init__(self):
        for key in ("tau", "margin", "sinkhorn_eps", "ridge"):
            if not getattr(self, key) > 0:
                raise ValueError(f"{key} must be positive")
        if self.sinkhorn_max_iter < 1:
            raise ValueError("sinkhorn_max_iter must be >= 1")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda weights must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


def _batch(x) -> Tensor:
    x = ad.as_tensor(x)
    return ad.reshape(x, (1, x.shape[0])) if x.ndim == 1 else x


def _column(x: Tensor) -> Tensor:
    return ad.reshape(x, (x.shape[0], 1))


# ---------------------------------------------------------------- DHF


def ntxent_homo_het(homo: dict, hetero: dict, tau: float) -> Tensor:
    """Homogeneous pairs as positives, the anchor's own heterogeneous rep as negative.

    Averaged over the 6 ordered modality pairs and over the batch. Vectors of
    shape ``(d,)`` are treated as a batch of one.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    homo = {m: _batch(homo[m]) for m in MODALITIES}
    hetero = {m: _batch(hetero[m]) for m in MODALITIES}
    pos = {}
    for a, b in ORDERED_PAIRS:
        if (b, a) in pos:
            pos[(a, b)] = pos[(b, a)]
        else:
            pos[(a, b)] = ad.cosine_distance(homo[a], homo[b])
    neg = {m: ad.cosine_distance(homo[m], hetero[m]) for m in MODALITIES}

    terms = []
    for a, b in ORDERED_PAIRS:
        # -log(G_pos / (G_pos + G_neg)) = D_pos/tau + logsumexp(-D_pos/tau, -D_neg/tau)
        scaled_pos = ad.scalar_mul(_column(pos[(a, b)]), -1.0 / tau)
        scaled_neg = ad.scalar_mul(_column(neg[a]), -1.0 / tau)
        lse = ad.logsumexp(ad.concat([scaled_pos, scaled_neg], axis=-1), axis=-1)
        terms.append(_column(ad.sub(lse, ad.reshape(scaled_pos, lse.shape))))
    return ad.mean(ad.concat(terms, axis=-1))


def noise_consistency_loss(noise: dict, margin: float) -> Tensor:
    """Same-modality noise reps agree across samples; modalities stay ``margin`` apart."""
    noise = {m: ad.as_tensor(noise[m]) for m in MODALITIES}
    nb = noise["L"].shape[0]
    if nb < 2:
        raise ValueError("noise_consistency_loss needs a batch of at least 2 samples")
    off_diag = Tensor(1.0 - np.eye(nb))
    term1 = None
    for m in MODALITIES:
        x = noise[m]
        d = x.shape[1]
        pair = ad.cosine_distance(ad.reshape(x, (nb, 1, d)), ad.reshape(x, (1, nb, d)))
        s = ad.sum_(ad.mul(pair, off_diag))
        term1 = s if term1 is None else ad.add(term1, s)
    term1 = ad.scalar_mul(term1, 1.0 / (3 * nb * (nb - 1)))

    term2 = None
    for a, b in ORDERED_PAIRS:
        gap = ad.relu(ad.sub(margin, ad.cosine_distance(noise[a], noise[b])))
        s = ad.sum_(gap)
        term2 = s if term2 is None else ad.add(term2, s)
    term2 = ad.scalar_mul(term2, 1.0 / (6 * nb))
    return ad.add(term1, term2)


def gaussian_entropy(x: Tensor, ridge: float) -> Tensor:
    """Entropy of a Gaussian with the batch's diagonal covariance plus ``ridge * I``."""
    x = ad.as_tensor(x)
    d = x.shape[1]
    var = batch_variance(x)
    logdet = ad.sum_(ad.log(ad.add(var, ridge)))
    return ad.add(ad.scalar_mul(logdet, 0.5), 0.5 * d * LOG_2PI_E)


def batch_variance(x: Tensor) -> Tensor:
    """Per-dimension population variance over the batch axis."""
    centered = ad.sub(x, ad.mean(x, axis=0, keepdims=True))
    return ad.mean(ad.square(centered), axis=0)


def noise_entropy_loss(noise: dict, noise_mean: dict, noise_var: dict, ridge: float) -> Tensor:
    total = None
    for m in MODALITIES:
        x = ad.as_tensor(noise[m])
        if x.shape[0] < 2:
            raise ValueError("noise_entropy_loss needs a batch of at least 2 samples")
        mean_gap = ad.sub(ad.mean(x, axis=0), np.broadcast_to(noise_mean[m], (x.shape[1],)))
        var_gap = ad.sub(batch_variance(x), np.broadcast_to(noise_var[m], (x.shape[1],)))
        term = ad.add(
            gaussian_entropy(x, ridge),
            ad.add(ad.sum_(ad.square(mean_gap)), ad.sum_(ad.square(var_gap))),
        )
        total = term if total is None else ad.add(total, term)
    return ad.scalar_mul(total, 1.0 / 3.0)


def dhf_losses(reps: dict, cfg: LossConfig) -> tuple[Tensor, Tensor, Tensor]:
    """``(homo-hetero contrastive, noise consistency, noise entropy)`` for one branch."""
    homo = {m: reps[m][0] for m in MODALITIES}
    hetero = {m: reps[m][1] for m in MODALITIES}
    noise = {m: reps[m][2] for m in MODALITIES}
    return (
        ntxent_homo_het(homo, hetero, cfg.tau),
        noise_consistency_loss(noise, cfg.margin),
        noise_entropy_loss(noise, cfg.noise_mean, cfg.noise_var, cfg.ridge),
    )


# ---------------------------------------------------------------- Sinkhorn


@dataclass
class SinkhornResult:
    plan: np.ndarray
    cost: float
    n_iter: int
    marginal_error: float
    f_hist: list
    g_hist: list
    eps_hist: list


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return np.squeeze(np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m, axis=axis)


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def eps_schedule(cost: np.ndarray, eps: float) -> list[float]:
    """Annealing values ``eps * 2**j`` for ``j = J..1``, with ``eps * 2**J`` the
    first power-of-two multiple of ``eps`` covering the cost range.

    The values are piecewise constant in the costs, so they contribute no
    gradient except on a measure-zero set.
    """
    spread = float(np.max(cost) - np.min(cost)) if cost.size else 0.0
    if spread <= eps:
        return []
    top = int(math.ceil(math.log2(spread / eps)))
    return [eps * 2.0 ** j for j in range(top, 0, -1)]


def sinkhorn_solve(cost: np.ndarray, eps: float, max_iter: int = 200, tol: float = 1e-6,
                   anneal: bool = True) -> SinkhornResult:
    """Log-domain Sinkhorn-Knopp between uniform marginals.

    With ``anneal`` the first sweeps use a geometrically decreasing
    regularization (from the cost range down to ``eps``), warm-starting the
    potentials; this leaves the fixed point unchanged but converges far faster
    when costs are large relative to ``eps``. Annealing sweeps count toward
    ``max_iter``. Stops once the max row-marginal violation at ``eps`` drops
    below ``tol`` (columns are exact after every update); ``tol <= 0`` runs
    exactly ``max_iter`` sweeps.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if not np.all(np.isfinite(cost)):
        raise NumericalDomainError("non-finite entries in cost matrix")
    if eps <= 0:
        raise ValueError("eps must be positive")
    n, m = cost.shape
    log_a, log_b = -math.log(n), -math.log(m)
    a = 1.0 / n
    warm = eps_schedule(cost, eps) if anneal else []
    g = np.zeros(m)
    f = None
    f_hist, g_hist, eps_hist = [], [], []
    for k in range(max_iter):
        e = warm[k] if k < len(warm) else eps
        f_new = e * (log_a - _lse((g[None, :] - cost) / e, axis=1))
        if f is not None and tol > 0 and e == eps and eps_hist[-1] == eps:
            violation = np.max(np.abs(a * np.exp((f - f_new) / eps) - a))
            if violation < tol:
                break
        g_hist.append(g)
        eps_hist.append(e)
        f = f_new
        f_hist.append(f)
        g = e * (log_b - _lse((f[:, None] - cost) / e, axis=0))
    e = eps_hist[-1]
    plan = np.exp((f[:, None] + g[None, :] - cost) / e)
    err = max(np.max(np.abs(plan.sum(axis=1) - a)), np.max(np.abs(plan.sum(axis=0) - 1.0 / m)))
    g_hist.append(g)
    return SinkhornResult(plan, float((plan * cost).sum()), len(f_hist), float(err),
                          f_hist, g_hist, eps_hist)


def _transpose_first(c: np.ndarray) -> bool:
    """Canonical orientation so that the solves for ``C`` and ``C.T`` coincide:
    wide before tall, then by the first entry where ``C`` and ``C.T`` differ."""
    if c.shape[0] != c.shape[1]:
        return c.shape[0] > c.shape[1]
    diff = np.flatnonzero(c != c.T)
    if diff.size == 0:
        return False
    i = diff[0]
    return c.T.flat[i] < c.flat[i]


def sinkhorn_cost(cost, eps: float, max_iter: int = 200, tol: float = 1e-6) -> Tensor:
    """Transport cost <C, P> under the entropic plan, differentiated by unrolling.

    The solve runs on a canonical orientation of ``C`` (itself or its
    transpose), so swapping the two point clouds gives the same value.
    """
    cost = ad.as_tensor(cost)
    flip = _transpose_first(cost.data)
    c = np.ascontiguousarray(cost.data.T) if flip else cost.data
    res = sinkhorn_solve(c, eps, max_iter, tol)

    def bwd(gout):
        gout = float(gout)
        plan = res.plan
        e_last = res.eps_hist[-1]
        gc = gout * plan * (1.0 - c / e_last)
        cp = gout * plan * c / e_last
        f_bar_out = cp.sum(axis=1)
        g_bar = cp.sum(axis=0)
        k_last = res.n_iter - 1
        for k in range(k_last, -1, -1):
            e = res.eps_hist[k]
            # g_k = e log b - e LSE_i((f_k - C)/e)
            col = _softmax((res.f_hist[k][:, None] - c) / e, axis=0)
            gc += col * g_bar[None, :]
            f_bar = -(col @ g_bar)
            if k == k_last:
                f_bar = f_bar + f_bar_out
            # f_k = e log a - e LSE_j((g_prev - C)/e)
            row = _softmax((res.g_hist[k][None, :] - c) / e, axis=1)
            gc += row * f_bar[:, None]
            g_bar = -(row.T @ f_bar)
        return (gc.T if flip else gc,)

    return ad.make_op(np.asarray(res.cost), (cost,), bwd)


def squared_distances(x: Tensor, y: Tensor) -> Tensor:
    """Pairwise ``|x_i - y_j|^2`` as an ``(n, m)`` tensor."""
    x, y = ad.as_tensor(x), ad.as_tensor(y)
    n, d = x.shape
    m = y.shape[0]
    diff = ad.sub(ad.reshape(x, (n, 1, d)), ad.reshape(y, (1, m, d)))
    return ad.sum_(ad.square(diff), axis=-1)


def sinkhorn_distance(x, y, eps: float = 0.1, max_iter: int = 200, tol: float = 1e-6) -> Tensor:
    """Entropic OT transport cost between uniform point clouds, squared-Euclidean cost."""
    x, y = _batch(x), _batch(y)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"point dimension mismatch {x.shape} vs {y.shape}")
    return sinkhorn_cost(squared_distances(x, y), eps, max_iter, tol)


# ---------------------------------------------------------------- logits / task


def _check_simplex(p: np.ndarray, name: str) -> None:
    if np.any(p < 0):
        raise ValueError(f"{name} has negative entries")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError(f"{name} does not sum to 1")


def js_divergence(p, q) -> Tensor:
    """Jensen-Shannon divergence (natural log) along the last axis."""
    p, q = ad.as_tensor(p), ad.as_tensor(q)
    _check_simplex(p.data, "P")
    _check_simplex(q.data, "Q")
    mid = ad.scalar_mul(ad.add(p, q), 0.5)
    inner = ad.sub(
        ad.scalar_mul(ad.add(ad.xlogx(p), ad.xlogx(q)), 0.5),
        ad.xlogx(mid),
    )
    return ad.sum_(inner, axis=-1)


def task_loss(preds, labels, mode: str) -> Tensor:
    """Branch-averaged MSE (regression) or cross-entropy (classification).

    ``preds`` is one tensor or a sequence of per-branch tensors.
    """
    if isinstance(preds, Tensor):
        preds = [preds]
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    total = None
    for pred in preds:
        if mode == "regression":
            if pred.ndim != 1:
                raise ValueError("regression predictions must be 1-D scores")
            term = ad.mean(ad.square(ad.sub(pred, labels)))
        elif mode == "classification":
            if pred.ndim != 2:
                raise ValueError("classification predictions must be (B, C) probabilities")
            idx = labels.astype(int)
            if np.any(idx != labels) or np.any(idx < 0) or np.any(idx >= pred.shape[1]):
                raise ValueError("classification labels must be class indices")
            picked = ad.take(pred, (np.arange(len(idx)), idx))
            term = ad.scalar_mul(ad.mean(ad.log(picked)), -1.0)
        else:
            raise ValueError(f"unknown task mode {mode!r}")
        total = term if total is None else ad.add(total, term)
    return ad.scalar_mul(total, 1.0 / len(preds))


def total_loss(task, dhf, das, lambda1: float = 0.2, lambda2: float = 0.1):
    """``task + lambda1 * dhf + lambda2 * das``; tensors in, tensor out."""
    parts = (task, dhf, das)
    for part in parts:
        value = part.data if isinstance(part, Tensor) else np.asarray(part)
        if not np.all(np.isfinite(value)):
            raise NumericalDomainError("non-finite loss component")
    if not any(isinstance(p, Tensor) for p in parts):
        return float(task) + lambda1 * float(dhf) + lambda2 * float(das)
    return ad.add(ad.add(task, ad.scalar_mul(dhf, lambda1)), ad.scalar_mul(das, lambda2))
