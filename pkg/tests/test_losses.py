import itertools
import math

import numpy as np
import pytest
from scipy.optimize import linprog

from fsrf import autodiff as ad
from fsrf.autodiff import NumericalDomainError, Tensor, grad_check
from fsrf.data import MODALITIES
from fsrf.losses import (
    LOG_2PI_E,
    LossConfig,
    batch_variance,
    gaussian_entropy,
    js_divergence,
    noise_consistency_loss,
    noise_entropy_loss,
    ntxent_homo_het,
    sinkhorn_distance,
    sinkhorn_solve,
    squared_distances,
    task_loss,
    total_loss,
)

LN2 = math.log(2.0)


def per_mod(arrays):
    return {m: Tensor(a) for m, a in zip(MODALITIES, arrays)}


# ---------------------------------------------------------------- homo/hetero contrast


def test_ntxent_symmetric_degenerate_is_ln2():
    v = np.array([[1.0, 2.0, -1.0]])
    reps = per_mod([v, v, v])
    assert abs(ntxent_homo_het(reps, reps, 0.1).item() - LN2) <= 1e-9


def test_ntxent_equal_distances_any_tau():
    rng = np.random.default_rng(0)
    h = rng.standard_normal((4, 6))
    homo = per_mod([h, h, h])
    # heterogeneous reps equal to the homogeneous ones: D_pos = D_neg = 0
    for tau in (0.05, 1.0, 3.0):
        assert abs(ntxent_homo_het(homo, homo, tau).item() - LN2) <= 1e-9


def test_ntxent_aligned_and_orthogonal_is_small():
    e1, e2 = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    loss = ntxent_homo_het(per_mod([e1, e1, e1]), per_mod([e2, e2, e2]), 0.1).item()
    assert abs(loss - math.log1p(math.exp(-10.0))) < 1e-12


def test_ntxent_positive_and_rejects_bad_tau():
    rng = np.random.default_rng(1)
    a = per_mod([rng.standard_normal((3, 4)) for _ in range(3)])
    b = per_mod([rng.standard_normal((3, 4)) for _ in range(3)])
    assert ntxent_homo_het(a, b, 0.5).item() > 0
    with pytest.raises(ValueError):
        ntxent_homo_het(a, b, 0.0)


# ---------------------------------------------------------------- noise consistency


def test_noise_consistency_zero_case():
    eye = np.eye(3)
    noise = per_mod([np.tile(eye[i], (4, 1)) for i in range(3)])
    assert noise_consistency_loss(noise, 1.0).item() == 0.0


def test_noise_consistency_all_identical_is_margin():
    v = np.tile([[0.3, -1.0, 2.0]], (2, 1))
    assert abs(noise_consistency_loss(per_mod([v, v, v]), 1.0).item() - 1.0) < 1e-12


def test_noise_consistency_term1_hand_value():
    # L rows orthogonal across the two samples -> D = 1 for both ordered pairs;
    # term1 = (1 / (3*2*1)) * 2 = 1/3; modalities mutually orthogonal -> term2 = 0
    l = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
    a = np.array([[0, 0, 1.0, 0]] * 2)
    v = np.array([[0, 0, 0, 1.0]] * 2)
    out = noise_consistency_loss(per_mod([l, a, v]), 1.0).item()
    assert abs(out - 1.0 / 3.0) < 1e-12


def test_noise_consistency_nonnegative_and_batch_check():
    rng = np.random.default_rng(2)
    for _ in range(20):
        noise = per_mod([rng.standard_normal((5, 3)) for _ in range(3)])
        assert noise_consistency_loss(noise, 0.7).item() >= 0
    with pytest.raises(ValueError):
        noise_consistency_loss(per_mod([np.ones((1, 2))] * 3), 1.0)


# ---------------------------------------------------------------- noise entropy


def unit_variance_batch(n, d, rng):
    x = rng.standard_normal((n, d))
    x = x - x.mean(axis=0)
    return x / x.std(axis=0)


def test_gaussian_entropy_unit_variance():
    d, ridge = 5, 1e-4
    x = unit_variance_batch(64, d, np.random.default_rng(3))
    h = gaussian_entropy(Tensor(x), ridge).item()
    assert abs(h - 0.5 * d * (LOG_2PI_E + math.log1p(ridge))) <= 1e-6
    assert abs(gaussian_entropy(Tensor(x), 1e-12).item() - 0.5 * d * LOG_2PI_E) <= 1e-6


def test_gaussian_entropy_constant_batch():
    d, r = 3, 1e-3
    h = gaussian_entropy(Tensor(np.ones((4, d)) * 2.5), r).item()
    assert abs(h - 0.5 * d * math.log(2 * math.pi * math.e * r)) < 1e-12


def test_batch_variance_is_population_variance():
    x = np.random.default_rng(4).standard_normal((7, 3))
    np.testing.assert_allclose(batch_variance(Tensor(x)).data, x.var(axis=0), atol=1e-14)


def test_noise_entropy_targets_met_leaves_entropy_only():
    rng = np.random.default_rng(5)
    d = 4
    batches = [unit_variance_batch(16, d, rng) + 0.5 * i for i in range(3)]
    mean = {m: 0.5 * i for i, m in enumerate(MODALITIES)}
    var = {m: 1.0 for m in MODALITIES}
    ridge = 1e-4
    out = noise_entropy_loss(per_mod(batches), mean, var, ridge).item()
    assert abs(out - 0.5 * d * (LOG_2PI_E + math.log1p(ridge))) < 1e-9


def test_noise_entropy_regularizer_terms():
    d = 2
    x = np.zeros((3, d))  # mean 0, variance 0
    mean = {m: 1.0 for m in MODALITIES}
    var = {m: 2.0 for m in MODALITIES}
    r = 1e-2
    expected = 0.5 * d * math.log(2 * math.pi * math.e * r) + d * 1.0 + d * 4.0
    assert abs(noise_entropy_loss(per_mod([x, x, x]), mean, var, r).item() - expected) < 1e-12


# ---------------------------------------------------------------- sinkhorn


def exact_ot_lp(x, y):
    """Exact OT cost between uniform clouds via a linear program."""
    c = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    n, m = c.shape
    a_eq = []
    for i in range(n):
        row = np.zeros((n, m))
        row[i] = 1
        a_eq.append(row.ravel())
    for j in range(m):
        col = np.zeros((n, m))
        col[:, j] = 1
        a_eq.append(col.ravel())
    b_eq = [1.0 / n] * n + [1.0 / m] * m
    res = linprog(c.ravel(), A_eq=np.array(a_eq), b_eq=b_eq, bounds=(0, None), method="highs")
    assert res.success
    return res.fun


def exact_ot_permutations(x, y):
    """Equal-size uniform clouds: the optimum is a permutation (Birkhoff)."""
    c = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    n = len(x)
    return min(c[np.arange(n), list(p)].sum() for p in itertools.permutations(range(n))) / n


def test_oracles_agree():
    rng = np.random.default_rng(6)
    for _ in range(10):
        n = int(rng.integers(1, 6))
        x, y = rng.standard_normal((n, 2)), rng.standard_normal((n, 2))
        assert abs(exact_ot_lp(x, y) - exact_ot_permutations(x, y)) < 1e-9


def test_sinkhorn_matches_exact_ot():
    rng = np.random.default_rng(7)
    for k in range(50):
        n, m = (int(v) for v in rng.integers(1, 6, size=2))
        d = int(rng.integers(1, 4))
        x, y = rng.standard_normal((n, d)), rng.standard_normal((m, d))
        exact = exact_ot_lp(x, y)
        # near-degenerate plans converge sublinearly, so allow many sweeps
        res = sinkhorn_solve(squared_distances(Tensor(x), Tensor(y)).data, 0.01, 500000, 1e-6)
        assert res.n_iter < 500000
        assert abs(res.cost - exact) <= 0.02 * exact + 1e-12
        assert np.all(np.abs(res.plan.sum(1) - 1.0 / n) <= 1e-6)
        assert np.all(np.abs(res.plan.sum(0) - 1.0 / m) <= 1e-6)
        if k < 10:
            got = sinkhorn_distance(Tensor(x), Tensor(y), eps=0.01, max_iter=500000, tol=1e-6).item()
            assert abs(got - exact) <= 0.02 * exact + 1e-12


def test_sinkhorn_identity_coupling_on_line():
    x = Tensor(np.array([[0.0], [1.0]]))
    assert abs(sinkhorn_distance(x, x, eps=0.01).item()) <= 1e-3


def test_sinkhorn_symmetric_and_marginals_at_default_tol():
    rng = np.random.default_rng(8)
    x, y = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    a = sinkhorn_distance(Tensor(x), Tensor(y), eps=0.1).item()
    b = sinkhorn_distance(Tensor(y), Tensor(x), eps=0.1).item()
    assert a == b
    cost = squared_distances(Tensor(x), Tensor(y)).data
    short = sinkhorn_solve(cost, 0.1, 200, 1e-6)
    # stopping early is reported through the violation, not hidden
    assert short.n_iter == 200 and short.marginal_error > 1e-6
    full = sinkhorn_solve(cost, 0.1, 400000, 1e-6)
    assert full.n_iter < 400000 and full.marginal_error <= 1e-6
    assert abs(full.cost - a) < 1e-2


def test_sinkhorn_fixed_iterations_and_errors():
    c = np.random.default_rng(9).uniform(size=(3, 4))
    assert sinkhorn_solve(c, 0.5, max_iter=7, tol=0.0).n_iter == 7
    with pytest.raises(ValueError):
        sinkhorn_solve(c, 0.0)
    bad = c.copy()
    bad[0, 0] = np.inf
    with pytest.raises(NumericalDomainError):
        sinkhorn_solve(bad, 0.1)
    with pytest.raises(ValueError):
        sinkhorn_distance(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 3))))


def test_sinkhorn_unrolled_gradient_three_points():
    rng = np.random.default_rng(10)
    y = Tensor(rng.standard_normal((3, 2)))
    for eps in (0.1, 0.5):
        err = grad_check(lambda x: sinkhorn_distance(x, y, eps=eps, max_iter=50, tol=0.0),
                         rng.standard_normal((3, 2)), 1e-6)
        assert err <= 1e-4


# ---------------------------------------------------------------- js divergence


def test_js_disjoint_is_ln2():
    p = Tensor(np.array([[1.0, 0.0, 0.0]]))
    q = Tensor(np.array([[0.0, 0.5, 0.5]]))
    assert abs(js_divergence(p, q).item() - LN2) <= 1e-9


def test_js_properties():
    rng = np.random.default_rng(11)
    for _ in range(20):
        p = rng.dirichlet(np.ones(4), size=3)
        q = rng.dirichlet(np.ones(4), size=3)
        a = js_divergence(Tensor(p), Tensor(q)).data
        b = js_divergence(Tensor(q), Tensor(p)).data
        np.testing.assert_allclose(a, b, atol=1e-15)
        assert np.all(a >= -1e-15) and np.all(a <= LN2 + 1e-12)
        assert np.all(np.abs(js_divergence(Tensor(p), Tensor(p)).data) < 1e-15)


def test_js_rejects_non_simplex():
    with pytest.raises(ValueError):
        js_divergence(Tensor([0.5, 0.6]), Tensor([0.5, 0.5]))
    with pytest.raises(ValueError):
        js_divergence(Tensor([1.5, -0.5]), Tensor([0.5, 0.5]))


# ---------------------------------------------------------------- task / total


def test_cross_entropy_uniform_and_branch_mean():
    uniform = Tensor(np.full((3, 2), 0.5))
    assert abs(task_loss(uniform, [0, 1, 1], "classification").item() - LN2) < 1e-15
    sure = Tensor(np.array([[0.9, 0.1], [0.2, 0.8]]))
    single = task_loss(sure, [0, 1], "classification").item()
    assert abs(single + 0.5 * (math.log(0.9) + math.log(0.8))) < 1e-15
    both = task_loss([sure, Tensor(np.full((2, 2), 0.5))], [0, 1], "classification").item()
    assert abs(both - 0.5 * (single + LN2)) < 1e-15


def test_mse_and_label_validation():
    pred = Tensor(np.array([1.0, -1.0, 0.5]))
    assert abs(task_loss(pred, [0.0, 1.0, 0.5], "regression").item() - 5.0 / 3.0) < 1e-15
    with pytest.raises(ValueError):
        task_loss(Tensor(np.full((2, 2), 0.5)), [0, 2], "classification")
    with pytest.raises(ValueError):
        task_loss(pred, [0, 1, 0], "ranking")


def test_total_loss_exact():
    assert total_loss(1.0, 1.0, 1.0) == 1.3
    assert total_loss(1.0, 1.0, 1.0, 0.2, 0.1) == 1.3
    t = total_loss(Tensor(1.0), Tensor(1.0), Tensor(1.0))
    assert t.item() == 1.3
    with pytest.raises(NumericalDomainError):
        total_loss(1.0, float("nan"), 0.0)


def test_loss_config_validation():
    cfg = LossConfig()
    assert (cfg.tau, cfg.margin, cfg.sinkhorn_eps, cfg.ridge, cfg.lambda1, cfg.lambda2) == (0.1, 1.0, 0.1, 1e-4, 0.2, 0.1)
    with pytest.raises(ValueError):
        LossConfig(tau=0)
    with pytest.raises(ValueError):
        LossConfig(lambda1=-1)


@pytest.mark.parametrize("name", ["ntxent", "n1", "n2", "js", "ce", "mse"])
def test_loss_gradients(name):
    rng = np.random.default_rng(12)
    other = per_mod([rng.standard_normal((3, 4)) for _ in range(3)])
    q = Tensor(rng.dirichlet(np.ones(3), size=3))
    cfg = LossConfig()

    def split(x):
        return {m: ad.take(x, i) for i, m in enumerate(MODALITIES)}

    fns = {
        "ntxent": (lambda x: ntxent_homo_het(split(x), other, 0.2), (3, 3, 4)),
        "n1": (lambda x: noise_consistency_loss(split(x), 0.8), (3, 3, 4)),
        "n2": (lambda x: noise_entropy_loss(split(x), cfg.noise_mean, cfg.noise_var, 1e-3), (3, 3, 4)),
        "js": (lambda x: ad.mean(js_divergence(ad.softmax(x, axis=-1), q)), (3, 3)),
        "ce": (lambda x: task_loss(ad.softmax(x, axis=-1), [0, 2, 1], "classification"), (3, 3)),
        "mse": (lambda x: task_loss(x, [0.5, -1.0, 2.0], "regression"), (3,)),
    }
    fn, shape = fns[name]
    for _ in range(10):
        assert grad_check(fn, rng.standard_normal(shape), 1e-6) <= 1e-4
