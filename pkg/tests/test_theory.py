import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmbcd.data import BlockedSparseMatrix, Dataset, make_partition, make_rng, synth_regression
from vmbcd.problems import lasso, make_problem
from vmbcd.solvers import reference_solution
from vmbcd.theory import (
    TheoryParams,
    bound_convex,
    bound_early_linear,
    bound_linear_growth,
    bound_linear_ossc,
    bound_nonconvex,
    bound_sublinear,
    estimate_R0,
    step_size_lower_bound,
    stationarity_factor,
    rcd_G_bound,
    rcd_ossc_complexity,
    rcd_short_ossc_factor,
    relative_gap,
    rho_growth,
    rho_ossc,
    stationarity_G,
)


def _identity_problem(labels, reg="l1", lam=1.0, n=None):
    n = len(labels) if n is None else n
    A = BlockedSparseMatrix.from_dense(np.eye(len(labels), n))
    return make_problem(Dataset(A, np.asarray(labels, float)), "squared", 1.0, reg, lam)


def test_G_smooth_is_negative_gradient():
    pb = _identity_problem([1.0, -2.0, 0.5], reg="zero")
    x = np.array([0.3, 0.1, -1.0])
    np.testing.assert_allclose(stationarity_G(pb, x=x), -pb.full_gradient(x), atol=1e-15)


def test_G_l1_example():
    # f(x) = 1/2 ||x - b||^2 with b = (-3, 0): grad f(0) = (3, 0)
    pb = _identity_problem([-3.0, 0.0])
    np.testing.assert_allclose(stationarity_G(pb, x=np.zeros(2)), [-2.0, 0.0])


def test_G_small_at_reference_solution():
    ds, _ = synth_regression(0, 80, 30, 3, support=0.2)
    pb = lasso(ds, lam=0.5)
    x_star, _ = reference_solution(pb)
    assert np.linalg.norm(stationarity_G(pb, x=x_star)) <= 1e-6


def test_G_rejects_non_finite_gradient():
    A = BlockedSparseMatrix.from_dense(np.eye(1))
    pb = make_problem(Dataset(A, np.array([-1.0])), "squared-hinge", 1.0, "l1", 1.0)
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
        stationarity_G(pb, x=np.array([1e308]))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["l1", "group-l2"]))
def test_G_zero_exactly_at_prox_fixed_points(seed, kind):
    # with A = I, x = prox(b) is stationary; b itself generally is not
    rng = make_rng(seed)
    b = rng.standard_normal(6) * 2
    pb = make_problem(Dataset(BlockedSparseMatrix.from_dense(np.eye(6), make_partition(6, 2)), b),
                      "squared", 1.0, kind, 0.7)
    x = pb.reg.prox(b, 1.0, pb.partition)
    assert np.max(np.abs(stationarity_G(pb, x=x))) <= 1e-10
    y = x + rng.standard_normal(6) * 0.1
    assert np.max(np.abs(stationarity_G(pb, x=y))) > 1e-10


def test_relative_gap():
    assert relative_gap(2.0, 1.0) == 1.0
    assert relative_gap(0.5, 0.0) == 0.5
    assert relative_gap(-0.5, -1.0) == 0.5


def test_step_size_lower_bound():
    assert step_size_lower_bound(1.0, 2.0, 0.5, 0.1) == pytest.approx(0.45)
    assert step_size_lower_bound(10.0, 1.0) == 1.0
    np.testing.assert_allclose(step_size_lower_bound([1.0, 1.0], [2.0, 2.0], 0.5, 0.1, 1.0), [0.225, 0.225])
    with pytest.raises(ValueError):
        step_size_lower_bound(1.0, 1.0, eta=1.5)


def test_early_linear_uniform_factor():
    p = TheoryParams.for_rcd_unit(np.ones(4) * 3.0, np.full(4, 0.25))
    assert bound_early_linear(p).factor == pytest.approx(0.875, abs=1e-15)


def test_early_linear_lipschitz_factor():
    L = np.array([1.0, 1.0, 1.0, 5.0])
    p = TheoryParams.for_rcd_unit(L, L / L.sum())
    assert bound_early_linear(p).factor == pytest.approx(1 - 1 / 16, abs=1e-15)
    # short step gives the same factor under Lipschitz sampling
    s = TheoryParams.for_rcd_short(L, L / L.sum())
    assert bound_early_linear(s).factor == pytest.approx(1 - L.min() / (2 * 4 * L.mean()), abs=1e-15)


def test_early_linear_no_progress_at_eta_one():
    p = TheoryParams.for_rcd_unit(np.ones(3), np.full(3, 1 / 3), eta=1.0)
    assert bound_early_linear(p).factor == 1.0


def test_early_linear_phase_index():
    L = np.ones(4)
    p = TheoryParams.for_rcd_unit(L, np.full(4, 0.25), R0=1.0, f0_gap=100.0)
    e = bound_early_linear(p)
    # threshold = norm_PAM * pi * R0^2 = 4 * 0.25 * 1 = 1
    assert e.threshold == pytest.approx(1.0)
    assert e.k0_bar == math.ceil(math.log(100.0) / math.log(2 / (2 - 0.25)))
    # a start already below the threshold has no early phase
    assert bound_early_linear(TheoryParams.for_rcd_unit(L, np.full(4, 0.25), R0=1.0, f0_gap=0.5)).k0_bar == 0


def test_sublinear_at_k0_and_sampler_ratio():
    L = np.array([1.0, 2.0, 3.0, 10.0])
    N = len(L)
    uni = TheoryParams.for_rcd_unit(L, np.full(N, 1 / N), R0=2.0)
    lip = TheoryParams.for_rcd_unit(L, L / L.sum(), R0=2.0)
    # at k = k0 the denominator is 2N
    assert bound_sublinear(uni, 7, 7) == pytest.approx(uni.norm_PAM * 4.0 / N)
    assert uni.norm_PAM == pytest.approx(N * L.max())
    assert lip.norm_PAM == pytest.approx(N * L.mean())
    for k in (0, 10, 1000):
        assert bound_sublinear(uni, k) / bound_sublinear(lip, k) == pytest.approx(L.max() / L.mean())
        assert bound_sublinear(uni, k) == pytest.approx(2 * N * L.max() * 4.0 / (2 * N + k))
    with pytest.raises(ValueError):
        bound_sublinear(uni, 2, 5)


def test_sublinear_is_non_increasing():
    p = TheoryParams.for_line_search(np.full(3, 0.5), np.full(3, 4.0), np.full(3, 2.0), np.full(3, 1 / 3), R0=1.0)
    vals = [bound_sublinear(p, k) for k in range(0, 500, 7)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_bound_convex_decreasing_when_phases_meet():
    p = TheoryParams.for_rcd_unit(np.ones(4), np.full(4, 0.25), R0=1.0, f0_gap=50.0)
    vals = [bound_convex(p, k) for k in range(200)]
    assert vals[0] == 50.0
    k0 = bound_early_linear(p).k0_bar
    # with pi = 1/N the sublinear bound at k0 equals the phase threshold
    assert vals[k0] <= bound_early_linear(p).threshold * (1 + 1e-12)
    assert all(b <= a * (1 + 1e-12) for a, b in zip(vals, vals[1:]))


def test_growth_rho_continuity_and_limits():
    base = TheoryParams.for_rcd_unit(np.array([1.0, 2.0, 4.0]), np.array([0.2, 0.3, 0.5]))
    a, pi = base.norm_PAM, base.pi_bar
    at = TheoryParams.for_rcd_unit(base.L, base.p, mu=2 * a * pi)
    assert rho_growth(at) == pytest.approx(pi / 2, rel=1e-12)
    above = TheoryParams.for_rcd_unit(base.L, base.p, mu=2 * a * pi * (1 + 1e-9))
    assert rho_growth(above) == pytest.approx(pi / 2, rel=1e-6)
    tiny = TheoryParams.for_rcd_unit(base.L, base.p, mu=1e-12)
    assert bound_linear_growth(tiny) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        rho_growth(base)


def test_ossc_examples():
    # pi = 1 needs N = 1; ||H|| = mu gives rho = 1/2
    one = TheoryParams.for_rcd_unit(np.array([3.0]), np.array([1.0]), mu=3.0)
    assert rho_ossc(one) == pytest.approx(0.5)
    assert bound_linear_ossc(one) == pytest.approx(0.5)
    big = TheoryParams.for_rcd_unit(np.array([1.0, 2.0]), np.array([0.5, 0.5]), mu=1e12)
    assert rho_ossc(big) == pytest.approx(big.pi_bar, rel=1e-9)


def test_ossc_rate_dominates_growth_rate():
    rng = make_rng(0)
    for _ in range(10**4):
        N = int(rng.integers(1, 6))
        m = rng.uniform(0.01, 2.0, N)
        M = m * rng.uniform(1.0, 10.0, N)
        L = rng.uniform(0.1, 10.0, N)
        p = rng.dirichlet(np.ones(N)) + 1e-3
        p /= p.sum()
        params = TheoryParams(m, M, L, p, eta=rng.uniform(0, 0.9), gamma=rng.uniform(1e-4, 1),
                              mu=10 ** rng.uniform(-3, 3))
        assert rho_ossc(params) >= rho_growth(params) * (1 - 1e-12)
        for f in (bound_linear_ossc(params), bound_linear_growth(params)):
            assert 0.0 < f <= 1.0


def test_rcd_complexities():
    L = np.array([1.0, 1.0, 1.0, 5.0])
    uni = rcd_ossc_complexity(L, 0.5, 1e-3, sampler="uniform")
    lip = rcd_ossc_complexity(L, 0.5, 1e-3, sampler="lipschitz")
    assert uni / lip == pytest.approx(L.max() / L.mean())
    assert uni == pytest.approx(4 * 5 / 0.5 * math.log(1e3))
    assert rcd_short_ossc_factor(L, 1.0) == pytest.approx(1 - 0.5 / 20)
    assert rcd_short_ossc_factor(L, 1.0, sampler="lipschitz") == pytest.approx(1 - 0.5 / 8)
    with pytest.raises(ValueError):
        rcd_ossc_complexity(L, 1.0, 0.1, sampler="cyclic")


@pytest.mark.parametrize("c", np.geomspace(0.01, 100, 41))
def test_stationarity_factor_for_scaled_identity(c):
    assert stationarity_factor(c, c) == pytest.approx(max(c, 1.0), rel=1e-12)


def test_nonconvex_examples():
    p = TheoryParams(np.ones(2), np.ones(2), np.ones(2), np.full(2, 0.5), gamma=1.0, alpha=np.ones(2))
    b = bound_nonconvex(p, 9, f0_gap=3.0)
    assert b.q_bound == pytest.approx(0.3)
    # per-block factor (1 + 1 + 0)^2 / (p alpha m) = 4 / 0.5
    assert b.G_bound == pytest.approx(3.0 / (2 * 10) * 8.0)
    with pytest.raises(ValueError):
        bound_nonconvex(p, -1, f0_gap=1.0)
    with pytest.raises(ValueError):
        bound_nonconvex(p, 3)


@pytest.mark.parametrize("sampler", ["uniform", "lipschitz"])
def test_rcd_G_bound_matches_general_bound(sampler):
    L = np.array([1.0, 2.5, 4.0, 8.0])
    N = len(L)
    p = np.full(N, 1 / N) if sampler == "uniform" else L / L.sum()
    general = bound_nonconvex(TheoryParams.for_rcd_unit(L, p), 99, f0_gap=2.0).G_bound
    special = rcd_G_bound(L, p, 2.0, 99)
    assert general == pytest.approx(special, rel=1e-12)
    scale = L.max() if sampler == "uniform" else L.mean()
    assert special == pytest.approx(2 * N * scale * 2.0 / 100)


def test_theory_params_validation():
    with pytest.raises(ValueError):
        TheoryParams([0.0], [1.0], [1.0], [1.0])
    with pytest.raises(ValueError):
        TheoryParams([2.0], [1.0], [1.0], [1.0])
    with pytest.raises(ValueError):
        TheoryParams([1.0, 1.0], [1.0], [1.0], [0.7, 0.7])
    with pytest.raises(ValueError):
        TheoryParams([1.0], [1.0], [1.0], [1.0], alpha=[1.5])
    p = TheoryParams([1.0], [1.0], [4.0], [1.0])
    assert p.alpha[0] == pytest.approx(step_size_lower_bound(1.0, 4.0))


def test_estimate_R0_examples():
    pb = _identity_problem([2.0, -1.0], lam=0.5)
    x_star = np.array([1.5, -0.5])
    assert estimate_R0(pb, x_star, x_star).lower == 0.0
    est = estimate_R0(pb, np.zeros(2), x_star, iterates=[np.array([3.0, 0.0])], mu=1.0)
    assert est.lower == pytest.approx(np.linalg.norm([1.5, 0.5]))
    assert est.upper >= np.linalg.norm(x_star)
    with pytest.raises(ValueError):
        estimate_R0(pb, np.zeros(2), None)


def test_estimate_R0_upper_proxy_vs_level_set_in_one_dimension():
    # F(x) = 1/2 (2x - 3)^2 + |x|, mu = 4, x* = (6 - 1)/4
    A = BlockedSparseMatrix.from_dense(np.array([[2.0]]))
    pb = make_problem(Dataset(A, np.array([3.0])), "squared", 1.0, "l1", 1.0)
    x_star = np.array([1.25])
    for x0 in (-3.0, 0.0, 4.0):
        est = estimate_R0(pb, np.array([x0]), x_star, mu=4.0)
        grid = np.linspace(-20, 20, 400001)
        vals = 0.5 * (2 * grid - 3) ** 2 + np.abs(grid)
        level = grid[vals <= pb.value([x0]) + 1e-12]
        radius = np.max(np.abs(level - x_star[0]))
        assert radius <= est.upper * (1 + 1e-4)
        assert est.upper <= 3 * radius


def test_estimate_R0_upper_above_lower_for_quadratic():
    rng = make_rng(1)
    dense = rng.standard_normal((20, 5))
    pb = make_problem(Dataset(BlockedSparseMatrix.from_dense(dense), rng.standard_normal(20)),
                      "squared", 1.0, "zero", 0.0)
    x_star = np.linalg.lstsq(dense, pb.loss.labels, rcond=None)[0]
    mu = np.linalg.eigvalsh(dense.T @ dense)[0]
    x0 = rng.standard_normal(5)
    est = estimate_R0(pb, x0, x_star, mu=mu)
    assert est.upper >= est.lower
