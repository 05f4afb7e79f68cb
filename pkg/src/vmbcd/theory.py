"""Stationarity diagnostics and evaluators for the convergence-rate bounds.

Notation used throughout: ``m_i <= M_i`` bound the block metrics,
``L_i`` are the block Lipschitz constants, ``p_i`` the sampling
probabilities, ``alpha_i`` lower bounds on the accepted step sizes,
``pi = min_i alpha_i p_i`` and ``norm_PAM = max_i M_i / (alpha_i p_i)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .problems import CompositeProblem, SolverState


@dataclass
class TraceRecord:
    """One per-epoch line of a solver trace."""

    epoch: int
    F: float
    rel_gap: float | None
    G_norm_sq: float
    mean_alpha: float
    sparsity: float
    weighted_epoch: float
    wall_ms: float
    trials: int = 0
    support_changes: int = 0
    null_steps: int = 0


def stationarity_G(problem: CompositeProblem, state: SolverState | None = None, x=None) -> np.ndarray:
    """Full proximal-gradient step with identity metric.

    ``G = argmin_d grad f(x)^T d + 1/2 ||d||^2 + psi(x + d)``, computed as
    ``prox_psi(x - grad f(x)) - x``. Zero exactly at stationary points.
    """
    if state is None:
        state = problem.state_at(x)
    grad = problem.full_gradient(state)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    return problem.reg.prox(state.x - grad, 1.0, problem.partition) - state.x


def relative_gap(F: float, f_star: float) -> float:
    """``(F - F*) / |F*|``, or the absolute gap when ``F* = 0``."""
    denom = abs(f_star) if f_star != 0 else 1.0
    return (F - f_star) / denom


def step_size_lower_bound(m, L, beta: float = 0.5, gamma: float = 1e-4, eta: float = 0.0) -> np.ndarray:
    """Guaranteed lower bound on the backtracking step size.

    ``min{1, 2 beta (1 - gamma) m_i / (L_i (1 + sqrt(eta)))}``.
    """
    m = np.asarray(m, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    if not (0 < beta < 1 and 0 < gamma < 1):
        raise ValueError("beta and gamma must lie in (0, 1)")
    if not 0 <= eta <= 1:
        raise ValueError("eta must lie in [0, 1]")
    return np.minimum(1.0, 2.0 * beta * (1.0 - gamma) * m / (L * (1.0 + math.sqrt(eta))))


def stationarity_factor(m, M):
    """Constant ``c`` in ``||G_i|| <= c ||d_i*||`` for metrics with ``m I <= H <= M I``.

    ``c = M (1 + 1/m + sqrt(1 - 2/M + 1/m^2)) / 2``.
    """
    m = np.asarray(m, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    # 1 - 2/M + 1/m^2 >= (1 - 1/m)^2 >= 0 when m <= M; clip rounding
    rad = np.maximum(1.0 - 2.0 / M + 1.0 / m**2, 0.0)
    return M * (1.0 + 1.0 / m + np.sqrt(rad)) / 2.0


@dataclass
class TheoryParams:
    """Constants entering the rate bounds.

    ``alpha`` defaults to the line-search lower bound from ``m``, ``L``,
    ``beta``, ``gamma`` and ``eta``. ``mu``, ``R0`` and ``f0_gap``
    (``F(x0) - F*``) are only needed by the bounds that use them.
    """

    m: np.ndarray
    M: np.ndarray
    L: np.ndarray
    p: np.ndarray
    eta: float = 0.0
    gamma: float = 1e-4
    beta: float = 0.5
    mu: float | None = None
    R0: float | None = None
    f0_gap: float | None = None
    alpha: np.ndarray | None = None

    def __post_init__(self):
        self.m = np.atleast_1d(np.asarray(self.m, dtype=np.float64))
        N = len(self.m)
        self.M = np.broadcast_to(np.asarray(self.M, dtype=np.float64), (N,)).copy()
        self.L = np.broadcast_to(np.asarray(self.L, dtype=np.float64), (N,)).copy()
        self.p = np.broadcast_to(np.asarray(self.p, dtype=np.float64), (N,)).copy()
        if np.any(~(self.m > 0)) or np.any(self.M < self.m):
            raise ValueError("need 0 < m_i <= M_i")
        if np.any(~(self.L > 0)):
            raise ValueError("L_i must be positive")
        if np.any(~(self.p > 0)) or abs(self.p.sum() - 1.0) > 1e-10:
            raise ValueError("p must be a positive probability vector")
        if not 0 <= self.eta <= 1:
            raise ValueError("eta must lie in [0, 1]")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.alpha is None:
            self.alpha = step_size_lower_bound(self.m, self.L, self.beta, min(self.gamma, 1 - 1e-16), self.eta)
        else:
            self.alpha = np.broadcast_to(np.asarray(self.alpha, dtype=np.float64), (N,)).copy()
        if np.any(~(self.alpha > 0)) or np.any(self.alpha > 1):
            raise ValueError("step bounds must lie in (0, 1]")

    @classmethod
    def for_line_search(cls, m, M, L, p, eta=0.0, gamma=1e-4, beta=0.5, **kw) -> "TheoryParams":
        return cls(m, M, L, p, eta=eta, gamma=gamma, beta=beta, **kw)

    @classmethod
    def for_rcd_unit(cls, L, p, eta=0.0, **kw) -> "TheoryParams":
        """``H_i = L_i I`` with unit steps: ``alpha = 1`` and ``gamma = 1``."""
        L = np.asarray(L, dtype=np.float64)
        return cls(L, L, L, p, eta=eta, gamma=1.0, alpha=np.ones(len(L)), **kw)

    @classmethod
    def for_rcd_short(cls, L, p, eta=0.0, **kw) -> "TheoryParams":
        """``H_i = L_min I`` with steps ``L_min / L_i`` and ``gamma = 1``."""
        L = np.asarray(L, dtype=np.float64)
        Lmin = np.full(len(L), L.min())
        return cls(Lmin, Lmin, L, p, eta=eta, gamma=1.0, alpha=Lmin / L, **kw)

    @property
    def N(self) -> int:
        return len(self.m)

    @property
    def pi_bar(self) -> float:
        return float(np.min(self.alpha * self.p))

    @property
    def norm_PAM(self) -> float:
        return float(np.max(self.M / (self.alpha * self.p)))

    def _need(self, *names):
        for name in names:
            if getattr(self, name) is None:
                raise ValueError(f"{name} is required for this bound")


class EarlyLinear(NamedTuple):
    factor: float
    k0_bar: int | None
    threshold: float | None


def bound_early_linear(params: TheoryParams) -> EarlyLinear:
    """Per-iteration contraction ``1 - (1 - eta) gamma pi / 2`` of the early phase.

    Also returns the phase-change index
    ``k0 = ceil(max(0, log(gap0 / (norm_PAM pi R0^2)) / log(2 / (2 - (1-eta) gamma pi))))``
    and the gap threshold ``norm_PAM pi R0^2`` when ``R0`` and ``f0_gap``
    are known.
    """
    c = (1.0 - params.eta) * params.gamma * params.pi_bar
    factor = 1.0 - c / 2.0
    if params.R0 is None or params.f0_gap is None:
        return EarlyLinear(factor, None, None)
    threshold = params.norm_PAM * params.pi_bar * params.R0**2
    if c == 0.0:
        return EarlyLinear(factor, None, threshold)
    if params.f0_gap <= 0.0 or threshold <= 0.0:
        return EarlyLinear(factor, 0, threshold)
    ratio = math.log(params.f0_gap / threshold) / math.log(2.0 / (2.0 - c))
    return EarlyLinear(factor, int(math.ceil(max(0.0, ratio))), threshold)


def bound_sublinear(params: TheoryParams, k: int, k0: int = 0) -> float:
    """``2 norm_PAM R0^2 / (2N + (1 - eta) gamma (k - k0))`` for ``k >= k0``."""
    params._need("R0")
    if k < k0:
        raise ValueError("need k >= k0")
    return 2.0 * params.norm_PAM * params.R0**2 / (
        2.0 * params.N + (1.0 - params.eta) * params.gamma * (k - k0))


def bound_convex(params: TheoryParams, k: int) -> float:
    """Expected-gap envelope after ``k`` iterations for a fixed distribution.

    Linear phase before ``k0_bar``, sublinear afterwards.
    """
    params._need("R0", "f0_gap")
    early = bound_early_linear(params)
    if early.k0_bar is None or k < early.k0_bar:
        return early.factor**k * params.f0_gap
    return bound_sublinear(params, k, early.k0_bar)


def _growth_rho(mu, a, pi):
    if mu / (2.0 * a * pi) <= 1.0:
        return mu / (4.0 * a)
    return pi * (1.0 - pi * a / mu)


def rho_growth(params: TheoryParams) -> float:
    params._need("mu")
    if not params.mu > 0:
        raise ValueError("mu must be positive")
    return _growth_rho(params.mu, params.norm_PAM, params.pi_bar)


def bound_linear_growth(params: TheoryParams) -> float:
    """Contraction factor ``1 - (1 - eta) gamma rho`` under quadratic growth.

    ``rho = mu / (4 a)`` when ``mu / (2 a pi) <= 1`` and
    ``pi (1 - pi a / mu)`` otherwise, with ``a = norm_PAM``.
    """
    return 1.0 - (1.0 - params.eta) * params.gamma * rho_growth(params)


def rho_ossc(params: TheoryParams) -> float:
    params._need("mu")
    if not params.mu > 0:
        raise ValueError("mu must be positive")
    return 1.0 / (1.0 / params.pi_bar + params.norm_PAM / params.mu)


def bound_linear_ossc(params: TheoryParams) -> float:
    """Contraction factor ``1 - (1 - eta) gamma rho`` under optimal-set strong convexity.

    ``rho = (1/pi + max_i M_i / (mu alpha_i p_i))^{-1}``.
    """
    return 1.0 - (1.0 - params.eta) * params.gamma * rho_ossc(params)


def _L_scale(L, sampler: str) -> float:
    L = np.asarray(L, dtype=np.float64)
    if sampler == "uniform":
        return float(L.max())
    if sampler == "lipschitz":
        return float(L.mean())
    raise ValueError(f"unknown sampler {sampler!r}")


def rcd_ossc_complexity(L, mu: float, eps: float, eta: float = 0.0, sampler: str = "uniform") -> float:
    """Iteration count ``N L / ((1 - eta) mu) log(1/eps)`` for unit-step RCD.

    ``L`` is ``L_max`` for uniform and ``L_avg`` for Lipschitz sampling;
    constants hidden in the order estimate are taken to be one.
    """
    N = len(np.atleast_1d(L))
    return N * _L_scale(L, sampler) / ((1.0 - eta) * mu) * math.log(1.0 / eps)


def rcd_short_ossc_factor(L, mu: float, eta: float = 0.0, sampler: str = "uniform") -> float:
    """``1 - (1 - eta) (1 + 1/mu)^{-1} / (N L)`` for short-step RCD."""
    N = len(np.atleast_1d(L))
    return 1.0 - (1.0 - eta) / (1.0 + 1.0 / mu) / (N * _L_scale(L, sampler))


class NonconvexBound(NamedTuple):
    q_bound: float
    G_bound: float


def bound_nonconvex(params: TheoryParams, T: int, f0_gap: float | None = None) -> NonconvexBound:
    """Bounds over the first ``T + 1`` iterates for possibly nonconvex ``f``.

    ``q_bound``: ``min_k |E[alpha Q]| <= gap0 / (gamma (T + 1))``.
    ``G_bound``: ``min_k E||G_k||^2 <= gap0 / (2 (1-eta) gamma (T+1)) *
    max_i M_i^2 (1 + 1/m_i + sqrt(1 - 2/M_i + 1/m_i^2))^2 / (p_i alpha_i m_i)``.
    """
    if T < 0:
        raise ValueError("T must be >= 0")
    gap = params.f0_gap if f0_gap is None else f0_gap
    if gap is None:
        raise ValueError("f0_gap is required for this bound")
    q = gap / (params.gamma * (T + 1))
    c = 2.0 * stationarity_factor(params.m, params.M)
    worst = float(np.max(c**2 / (params.p * params.alpha * params.m)))
    if params.eta >= 1.0:
        return NonconvexBound(q, math.inf)
    G = gap / (2.0 * (1.0 - params.eta) * params.gamma * (T + 1)) * worst
    return NonconvexBound(q, G)


def rcd_G_bound(L, p, f0_gap: float, T: int, eta: float = 0.0) -> float:
    """``2 gap0 max_i (L_i / p_i) / ((1 - eta)(T + 1))`` for unit-step RCD."""
    L = np.asarray(L, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    return 2.0 * f0_gap * float(np.max(L / p)) / ((1.0 - eta) * (T + 1))


class R0Estimate(NamedTuple):
    lower: float
    upper: float | None


def estimate_R0(problem: CompositeProblem, x0, x_star, iterates=None, mu: float | None = None,
                f_star: float | None = None) -> R0Estimate:
    """Proxies for the level-set radius ``sup {||x - x*|| : F(x) <= F(x0)}``.

    ``lower``: the largest distance to ``x_star`` over ``x0`` and the given
    iterates. ``upper``: ``sqrt(2 (F(x0) - F*) / mu)`` when ``mu`` is known.
    """
    if x_star is None:
        raise ValueError("a reference solution is required")
    x_star = np.asarray(x_star, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    lower = float(np.linalg.norm(x0 - x_star))
    for x in iterates or ():
        lower = max(lower, float(np.linalg.norm(np.asarray(x) - x_star)))
    upper = None
    if mu is not None:
        if not mu > 0:
            raise ValueError("mu must be positive")
        F_star = problem.value(x_star) if f_star is None else f_star
        gap = max(problem.value(x0) - F_star, 0.0)
        upper = math.sqrt(2.0 * gap / mu)
    return R0Estimate(lower, upper)
