import json

import numpy as np
import pytest

from robust_rmdp.approx import (
    ErmDivergenceError,
    ErmOptions,
    FeatureMap,
    LinearDualClass,
    LinearQClass,
    RankDeficientError,
    apply_Tg_exact,
    dual_loss_empirical,
    dual_loss_population,
    erm_dual,
    least_squares_q,
    pointwise_dual_minimum,
    robust_targets_shift,
)
from robust_rmdp.benchmarks import chain, random_rmdp
from robust_rmdp.core import InvalidModelError, TabularRMDP
from robust_rmdp.data import Dataset, exhaustive_dataset, generate_dataset, uniform_mu
from robust_rmdp.dual import TVBallSpec, dual_objective, optimal_dual_table, robust_bellman_apply


def one_transition(s_next_value, n_states=2):
    """Dataset with a single transition (0, 0) -> 1."""
    mu = np.full((n_states, 1), 1.0 / n_states)
    return Dataset([0], [0], [0.0], [1], [1.0], mu)


# --- feature maps and classes ------------------------------------------------

def test_feature_maps(tmp_path):
    oh = FeatureMap.one_hot(3, 2)
    assert oh.dim == 6 and oh.is_partition
    ind = FeatureMap.indicator_table([[0, 1], [0, 1], [2, 2]])
    assert ind.dim == 3 and ind.is_partition
    assert ind.groups.tolist() == [0, 1, 0, 1, 2, 2]
    const = FeatureMap.constant(3, 2)
    assert const.is_partition and const.dim == 1
    dense = FeatureMap(np.arange(12.0).reshape(6, 2), 3, 2)
    assert not dense.is_partition
    path = tmp_path / "phi.json"
    path.write_text(json.dumps(dense.matrix.tolist()))
    loaded = FeatureMap.from_spec({"kind": "custom", "file": str(path)}, 3, 2)
    assert np.array_equal(loaded.matrix, dense.matrix)
    assert FeatureMap.from_spec("one-hot", 3, 2).dim == 6
    with pytest.raises(InvalidModelError):
        FeatureMap.from_spec({"kind": "wavelets"}, 3, 2)
    with pytest.raises(InvalidModelError):
        FeatureMap(np.ones((5, 2)), 3, 2)
    with pytest.raises(InvalidModelError):
        FeatureMap(np.full((6, 1), np.nan), 3, 2)


def test_class_ranges(rng):
    fm = FeatureMap(rng.normal(size=(8, 3)), 4, 2)
    for _ in range(20):
        w = rng.normal(scale=50, size=3)
        f = LinearQClass.zeros(fm, 0.9, fail_state=3).with_weights(w).table()
        assert f.min() >= 0.0 and f.max() <= 1 / (1 - 0.9) and np.all(f[3] == 0.0)
        g = LinearDualClass.zeros(fm, 0.25, 0.9).with_weights(w).table()
        assert g.min() >= 0.0 and g.max() <= 2 / (0.25 * (1 - 0.9))
    with pytest.raises(InvalidModelError):
        LinearDualClass.zeros(fm, 0.0, 0.9)
    with pytest.raises(InvalidModelError):
        LinearQClass.zeros(fm, 0.9).with_weights([1.0])


# --- dual losses -------------------------------------------------------------

def test_dual_loss_empirical_examples():
    d = one_transition(0.2)
    f = np.array([[0.0], [0.2]])
    assert dual_loss_empirical(np.zeros((2, 1)), f, d, 0.4) == 0.0
    g = np.array([[0.5], [0.0]])
    assert dual_loss_empirical(g, f, d, 0.4) == pytest.approx(0.0, abs=1e-15)
    g = np.array([[0.1], [0.0]])
    assert dual_loss_empirical(g, f, d, 1.0) == 0.0
    with pytest.raises(ValueError):
        dual_loss_empirical(g, f, Dataset([], [], [], [], [], np.full((2, 1), 0.5)), 0.4)


def test_dual_loss_population_examples(rng):
    m = random_rmdp(rng, 4, 2, rho=0.3)
    mu = uniform_mu(4, 2)
    f = np.full((4, 2), 3.0)
    assert dual_loss_population(np.zeros((4, 2)), f, m, mu, 0.3) == 0.0
    assert dual_loss_population(np.full((4, 2), 3.0), f, m, mu, 0.3) == pytest.approx(-0.7 * 3.0)


def test_empirical_loss_concentrates(rng):
    m = random_rmdp(rng, 4, 2, rho=0.3)
    mu = uniform_mu(4, 2)
    f = rng.uniform(0, 10, size=(4, 2))
    g = rng.uniform(0, 10, size=(4, 2))
    d = generate_dataset(m, mu, 100_000, seed=1)
    v = f.max(axis=1)
    terms = np.maximum(g[d.s, d.a] - v[d.s_next], 0.0) - 0.7 * g[d.s, d.a]
    se = terms.std() / np.sqrt(len(d))
    gap = dual_loss_empirical(g, f, d, 0.3) - dual_loss_population(g, f, m, mu, 0.3)
    assert abs(gap) <= 4 * se


def test_exhaustive_loss_equals_population(rng):
    m = random_rmdp(rng, 4, 3, rho=0.3)
    mu = rng.dirichlet(np.ones(12)).reshape(4, 3)
    f, g = rng.uniform(0, 10, size=(4, 3)), rng.uniform(0, 10, size=(4, 3))
    d = exhaustive_dataset(m, mu)
    assert dual_loss_empirical(g, f, d, 0.3) == pytest.approx(
        dual_loss_population(g, f, m, mu, 0.3), abs=1e-12
    )


# --- ERM ---------------------------------------------------------------------

def test_erm_exact_matches_breakpoint_oracle(rng, backend):
    m = random_rmdp(rng, 5, 2, rho=0.3, fail=True, sparsity=0.4)
    f = rng.uniform(0, m.v_max, size=(5, 2))
    f[m.fail_state] = 0.0
    mu = uniform_mu(5, 2)
    d = exhaustive_dataset(m, mu)
    gclass = LinearDualClass.zeros(FeatureMap.one_hot(5, 2), 0.3, m.gamma)
    g, report = erm_dual(d, f, gclass)
    assert report.method == "exact"
    assert report.empirical_loss == pytest.approx(dual_loss_empirical(g, f, d, 0.3), abs=1e-12)
    eta = optimal_dual_table(f, m, TVBallSpec(0.3, True))
    v = f.max(axis=1)
    for s in range(5):
        for a in range(2):
            h_g = dual_objective(g.table()[s, a], m.kernel[s, a], v, 0.3, 0.0)
            h_eta = dual_objective(eta[s, a], m.kernel[s, a], v, 0.3, 0.0)
            assert h_g <= h_eta + 1e-12
    assert report.empirical_loss == pytest.approx(pointwise_dual_minimum(f, m, mu, 0.3), abs=1e-12)


@pytest.mark.parametrize("method", ["exact", "subgradient", "lp"])
def test_erm_methods_agree_on_one_hot(rng, method, backend):
    m = random_rmdp(rng, 4, 2, rho=0.4, fail=True)
    f = rng.uniform(0, m.v_max, size=(4, 2))
    d = generate_dataset(m, uniform_mu(4, 2), 2000, seed=3)
    gclass = LinearDualClass.zeros(FeatureMap.one_hot(4, 2), 0.4, m.gamma)
    opts = ErmOptions(method=method, steps=20000, tol=1e-6)
    g, report = erm_dual(d, f, gclass, opts)
    _, exact = erm_dual(d, f, gclass, ErmOptions(method="exact"))
    assert report.empirical_loss <= exact.empirical_loss + (1e-3 if method == "subgradient" else 1e-9)
    assert report.empirical_loss == pytest.approx(dual_loss_empirical(g, f, d, 0.4), abs=1e-12)
    assert len(report.loss_trace) >= 1


def test_erm_rho_one_and_constant_values(backend):
    m = chain(length=3, slip=0.2, rho=1.0, fail=True)
    d = exhaustive_dataset(m)
    f = np.random.default_rng(0).uniform(0, 10, size=(4, 2))
    gclass = LinearDualClass.zeros(FeatureMap.one_hot(4, 2), 1.0, m.gamma)
    zero_loss = dual_loss_empirical(np.zeros((4, 2)), f, d, 1.0)
    _, report = erm_dual(d, f, gclass)
    assert report.empirical_loss <= 0.0 and report.empirical_loss <= zero_loss
    c = 4.0
    flat = np.full((4, 2), c)
    gclass = LinearDualClass.zeros(FeatureMap.one_hot(4, 2), 0.3, m.gamma)
    opts = ErmOptions(method="subgradient", steps=5000)
    _, report = erm_dual(d, flat, gclass, opts)
    assert report.empirical_loss == pytest.approx(-(1 - 0.3) * c, abs=opts.tol + 1e-3)
    _, report = erm_dual(d, flat, gclass)
    assert report.empirical_loss == pytest.approx(-(1 - 0.3) * c, abs=1e-12)


def test_erm_objective_convex_in_weights(rng):
    m = random_rmdp(rng, 4, 2, rho=0.3)
    d = generate_dataset(m, uniform_mu(4, 2), 500, seed=0)
    f = rng.uniform(0, 10, size=(4, 2))
    fm = FeatureMap(rng.uniform(0.1, 1.0, size=(8, 3)), 4, 2)
    gclass = LinearDualClass.zeros(fm, 0.3, m.gamma)
    loss = lambda w: dual_loss_empirical(gclass.with_weights(w), f, d, 0.3)
    for _ in range(50):
        w1, w2 = rng.uniform(0, 5, size=3), rng.uniform(0, 5, size=3)
        assert loss(0.5 * (w1 + w2)) <= 0.5 * (loss(w1) + loss(w2)) + 1e-10


def test_erm_subgradient_on_dense_features_close_to_lp(rng, backend):
    m = random_rmdp(rng, 4, 2, rho=0.3, fail=True)
    d = generate_dataset(m, uniform_mu(4, 2), 3000, seed=5)
    f = rng.uniform(0, m.v_max, size=(4, 2))
    fm = FeatureMap(np.hstack([np.ones((8, 1)), rng.uniform(0, 1, size=(8, 2))]), 4, 2)
    gclass = LinearDualClass.zeros(fm, 0.3, m.gamma)
    _, sub = erm_dual(d, f, gclass, ErmOptions(steps=20000))
    _, lp = erm_dual(d, f, gclass, ErmOptions(method="lp"))
    assert sub.method == "subgradient"
    assert sub.empirical_loss <= lp.empirical_loss + 1e-2


def test_erm_divergence_detection(rng):
    m = random_rmdp(rng, 3, 2, rho=0.3)
    d = generate_dataset(m, uniform_mu(3, 2), 200, seed=0)
    f = rng.uniform(0, 10, size=(3, 2))
    gclass = LinearDualClass.zeros(FeatureMap.one_hot(3, 2), 0.3, m.gamma)
    # huge steps bounce between clip limits and never settle
    opts = ErmOptions(method="subgradient", steps=100, step_scale=1e6, patience=1, tol=-1.0)
    with pytest.raises(ErmDivergenceError):
        erm_dual(d, f, gclass, opts)
    with pytest.raises(InvalidModelError):
        erm_dual(d, f, gclass, ErmOptions(method="adam"))
    with pytest.raises(InvalidModelError):
        erm_dual(d, f, LinearDualClass.zeros(FeatureMap(np.ones((6, 2)), 3, 2), 0.3, 0.9),
                 ErmOptions(method="exact"))


def test_erm_options_from_dict():
    assert ErmOptions.from_dict({"steps": 10}).steps == 10
    with pytest.raises(InvalidModelError):
        ErmOptions.from_dict({"lr": 0.1})


# --- least squares -----------------------------------------------------------

def test_least_squares_interpolates_linear_targets(rng):
    fm = FeatureMap(np.hstack([np.ones((6, 1)), np.arange(6.0)[:, None] / 6]), 3, 2)
    w_true = np.array([2.0, 3.0])
    targets = fm.matrix @ w_true
    mu = uniform_mu(3, 2)
    s, a = np.divmod(np.arange(6), 2)
    d = Dataset(s, a, targets / 10, np.zeros(6, int), np.ones(6), mu)
    # zero dual function and rho: targets are exactly the rewards
    rho, gamma = 0.5, 0.9
    fclass = LinearQClass.zeros(fm, gamma)
    g = LinearDualClass.zeros(fm, rho, gamma)
    f, residual = least_squares_q(d, np.zeros((3, 2)), g, fclass, ridge=0.0)
    assert residual <= 1e-10
    assert np.allclose(f.weights, w_true / 10, atol=1e-10)


def test_least_squares_one_hot_cell_means(rng, backend):
    m = random_rmdp(rng, 4, 2, rho=0.3, fail=True)
    mu = uniform_mu(4, 2)
    mu = np.where(np.arange(8).reshape(4, 2) == 5, 0.0, mu)
    mu /= mu.sum()
    d = generate_dataset(m, mu, 400, seed=2)
    f_prev = rng.uniform(0, m.v_max, size=(4, 2))
    f_prev[m.fail_state] = 0.0
    fm = FeatureMap.one_hot(4, 2)
    g = LinearDualClass.zeros(fm, 0.3, m.gamma).with_weights(rng.uniform(0, 5, size=8))
    ridge = 1e-3
    f, _ = least_squares_q(d, f_prev, g, LinearQClass.zeros(fm, m.gamma, m.fail_state), ridge)
    atoms = d.atoms()
    y = atoms.wr + atoms.w * robust_targets_shift(atoms, f_prev, g, m.gamma, 0.3)
    sums = np.bincount(atoms.cell, weights=y, minlength=8)
    counts = atoms.cell_weights()
    expected = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0) * counts / (counts + ridge)
    assert np.allclose(f.weights, expected, atol=1e-10)
    # unobserved cell reads 0
    assert f.table().reshape(-1)[5] == 0.0


def test_least_squares_rank_deficient():
    fm = FeatureMap(np.ones((4, 2)), 2, 2)
    mu = uniform_mu(2, 2)
    d = Dataset([0, 1], [0, 1], [0.5, 0.1], [0, 1], [1.0, 1.0], mu)
    with pytest.raises(RankDeficientError):
        least_squares_q(d, np.zeros((2, 2)), LinearDualClass.zeros(fm, 0.3, 0.9),
                        LinearQClass.zeros(fm, 0.9), ridge=0.0)
    one_hot = FeatureMap.one_hot(2, 2)
    with pytest.raises(RankDeficientError):
        least_squares_q(d, np.zeros((2, 2)), LinearDualClass.zeros(one_hot, 0.3, 0.9),
                        LinearQClass.zeros(one_hot, 0.9), ridge=0.0)


def test_least_squares_targets_not_clipped():
    # a large g drives the target negative; the regression sees it raw
    m = chain(length=2, slip=0.0, rho=0.5, fail=True)
    fm = FeatureMap.one_hot(3, 2)
    d = exhaustive_dataset(m)
    g = LinearDualClass.zeros(fm, 0.5, m.gamma).with_weights(np.full(6, 30.0))
    f, _ = least_squares_q(d, np.zeros((3, 2)), g, LinearQClass.zeros(fm, m.gamma, 2), ridge=0.0)
    raw = f.raw().reshape(3, 2)
    assert raw[0, 0] < 0.0 and f.table()[0, 0] == 0.0


def test_apply_Tg_exact_delegation(rng):
    m = chain(length=3, slip=0.2, rho=0.3, fail=True)
    f = rng.uniform(0, m.v_max, size=(4, 2))
    f[m.fail_state] = 0.0
    assert np.array_equal(apply_Tg_exact(f, np.zeros((4, 2)), m, 0.3), m.reward)
    eta = optimal_dual_table(f, m, TVBallSpec(0.3, True))
    assert np.allclose(apply_Tg_exact(f, eta, m, 0.3)[:3],
                       robust_bellman_apply(f, m)[:3], atol=1e-12)
    small = np.full((4, 2), f.max(axis=1).min())
    assert np.allclose(apply_Tg_exact(f, small, m, 1.0), m.reward, atol=1e-12)


def four_state():
    """Fail-state model whose cumulative next-state masses sit near the 0.7 quantile.

    With ``f`` below, next-state values are ordered 3 < 2 < 0 < 1, and several
    rows put cumulative mass 0.68 to 0.72 around the level ``1 - rho = 0.7``,
    so small samples often pick the wrong breakpoint.
    """
    kernel = np.array([
        [[0.385, 0.315, 0.2, 0.1], [0.08, 0.32, 0.5, 0.1]],
        [[0.34, 0.28, 0.28, 0.1], [0.0, 0.2, 0.7, 0.1]],
        [[0.12, 0.28, 0.5, 0.1], [0.4, 0.1, 0.3, 0.2]],
        [[0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.0, 1.0]],
    ])
    reward = np.array([[0.2, 0.5], [0.9, 0.1], [0.4, 0.7], [0.0, 0.0]])
    return TabularRMDP(kernel, reward, 0.9, [1, 0, 0, 0], 0.3, 3)


@pytest.mark.slow
def test_generalization_errors_decay(backend):
    """ERM and regression errors for a fixed f shrink at least 2.5x from N=1e3 to 1e5."""
    m = four_state()
    mu = uniform_mu(4, 2)
    fm = FeatureMap.one_hot(4, 2)
    f = np.array([[6.0, 5.5], [4.0, 7.0], [5.0, 3.0], [0.0, 0.0]])
    best = pointwise_dual_minimum(f, m, mu, 0.3)
    erm_gap, reg_err = {}, {}
    for n in (1000, 100_000):
        gaps, errs = [], []
        for seed in range(20):
            d = generate_dataset(m, mu, n, seed)
            g, _ = erm_dual(d, f, LinearDualClass.zeros(fm, 0.3, m.gamma))
            gaps.append(dual_loss_population(g, f, m, mu, 0.3) - best)
            fit, _ = least_squares_q(d, f, g, LinearQClass.zeros(fm, m.gamma, 3))
            target = apply_Tg_exact(f, g, m, 0.3)
            errs.append(np.sqrt(np.sum(mu * (fit.table() - target) ** 2)))
        erm_gap[n], reg_err[n] = np.mean(gaps), np.mean(errs)
    assert erm_gap[1000] > 0.0
    assert erm_gap[1000] >= 2.5 * erm_gap[100_000]
    assert reg_err[1000] >= 2.5 * reg_err[100_000]
