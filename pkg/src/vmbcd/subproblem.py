"""Per-block regularized quadratic models and their (inexact) solvers.

For block ``i`` at the current iterate the model is

    Q(d) = g^T d + 1/2 d^T H d + psi_i(x_i + d) - psi_i(x_i)

with ``g`` the partial gradient and ``H`` a positive-definite metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .problems import SeparableRegularizer

SIGMA_MIN = 1e-10
SIGMA_MAX = 1e10
SPARSA_ACCEPT = 1e-4
SPARSA_MAX_INCREASES = 30
POWER_STEPS = 5
REFERENCE_BUDGET = 1000


class ScaledIdentity:
    """``H = c I``."""

    def __init__(self, c: float, size: int):
        c = float(c)
        if not c > 0:
            raise ValueError("scale must be positive")
        self.c = c
        self.size = size
        self.m = c
        self.M = c

    def matvec(self, v):
        return self.c * v

    def dense(self):
        return self.c * np.eye(self.size)

    def norm_estimate(self) -> float:
        return self.c


class DenseMetric:
    """Explicit symmetric matrix; ``m`` and ``M`` are its extreme eigenvalues."""

    def __init__(self, H, m: float | None = None, M: float | None = None):
        H = np.asarray(H, dtype=np.float64)
        self.H = H
        self.size = H.shape[0]
        if m is None or M is None:
            ev = np.linalg.eigvalsh(H)
            m, M = float(ev[0]), float(ev[-1])
        self.m = m
        self.M = M

    def matvec(self, v):
        return self.H @ v

    def dense(self):
        return self.H

    def norm_estimate(self) -> float:
        return self.M


class OperatorMetric:
    """Matrix-free metric given by a matvec and a known lower bound ``m``."""

    def __init__(self, matvec, size: int, m: float, M: float | None = None):
        self._matvec = matvec
        self.size = size
        self.m = float(m)
        self.M = M

    def matvec(self, v):
        return self._matvec(v)

    def dense(self):
        return np.column_stack([self._matvec(e) for e in np.eye(self.size)])

    def norm_estimate(self) -> float:
        if self.M is None:
            self.M = power_norm_estimate(self._matvec, self.size)
        return self.M


def power_norm_estimate(matvec, size: int, steps: int = POWER_STEPS) -> float:
    v = np.ones(size) / math.sqrt(size)
    est = 0.0
    for _ in range(steps):
        w = matvec(v)
        est = float(np.linalg.norm(w))
        if est == 0.0:
            return 0.0
        v = w / est
    return est


def floor_metric(H: np.ndarray, eps: float = 1e-10) -> DenseMetric:
    """Shift ``H`` by a multiple of the identity so its smallest eigenvalue is at least ``eps``.

    Matrices whose smallest eigenvalue is already ``>= eps`` are left alone.
    """
    H = 0.5 * (H + H.T)
    ev = np.linalg.eigvalsh(H)
    lo, hi = float(ev[0]), float(ev[-1])
    if lo < eps:
        shift = eps - lo
        H = H + shift * np.eye(H.shape[0])
        lo, hi = eps, hi + shift
    return DenseMetric(H, lo, hi)


@dataclass
class QuadraticModel:
    grad: np.ndarray
    metric: object
    reg: SeparableRegularizer
    block: int
    x: np.ndarray

    def __post_init__(self):
        self.grad = np.asarray(self.grad, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)

    @property
    def size(self) -> int:
        return len(self.grad)

    def psi_change(self, d) -> float:
        return self.reg.block_change(self.block, self.x, d)

    def prox_step(self, v, t) -> np.ndarray:
        """Returns ``d`` with ``x + d = prox_{t psi_i}(x + v)``."""
        return self.reg.block_prox(self.block, self.x + v, t) - self.x


@dataclass
class SubproblemSolution:
    d: np.ndarray
    q_value: float
    delta: float
    inner_iterations: int
    quad: float = 0.0  # d^T H d


def q_eval(model: QuadraticModel, d) -> float:
    d = np.asarray(d, dtype=np.float64)
    return float(model.grad @ d + 0.5 * (d @ model.metric.matvec(d))) + model.psi_change(d)


def delta_eval(model: QuadraticModel, d) -> float:
    """``g^T d + psi_i(x_i + d) - psi_i(x_i)``; equals ``Q(d) - 1/2 d^T H d``."""
    d = np.asarray(d, dtype=np.float64)
    return float(model.grad @ d) + model.psi_change(d)


def _solution(model, d, Hd, iters):
    lin = float(model.grad @ d)
    quad = float(d @ Hd)
    psi = model.psi_change(d)
    return SubproblemSolution(d, lin + 0.5 * quad + psi, lin + psi, iters, quad)


def _identity_scale(model) -> float:
    metric = model.metric
    if not isinstance(metric, ScaledIdentity):
        raise TypeError("closed-form solve needs a scaled-identity metric")
    if not metric.c > 0:
        raise ValueError("metric scale must be positive")
    return metric.c


def prox_identity_l1(model: QuadraticModel) -> SubproblemSolution:
    """Exact minimizer for ``H = cI`` and an l1 (or zero) regularizer."""
    c = _identity_scale(model)
    if model.reg.kind == "group-l2":
        raise ValueError("use prox_identity_group for group-l2")
    d = model.prox_step(-model.grad / c, 1.0 / c)
    return _solution(model, d, c * d, 0)


def prox_identity_group(model: QuadraticModel) -> SubproblemSolution:
    """Exact minimizer for ``H = cI`` and a group-l2 (or zero) regularizer."""
    c = _identity_scale(model)
    if model.reg.kind == "l1":
        raise ValueError("use prox_identity_l1 for l1")
    d = model.prox_step(-model.grad / c, 1.0 / c)
    return _solution(model, d, c * d, 0)


def solve_exact_identity(model: QuadraticModel) -> SubproblemSolution:
    if model.reg.kind == "group-l2":
        return prox_identity_group(model)
    return prox_identity_l1(model)


def sparsa_solve(model: QuadraticModel, t: int, tol: float | None = None) -> SubproblemSolution:
    """Monotone spectral proximal gradient on ``Q`` started from ``d = 0``.

    Runs at most ``t`` outer iterations. Each one proposes
    ``d+ = prox(d - (g + H d)/sigma)`` and accepts it once
    ``Q(d+) <= Q(d) - 1e-4 * sigma/2 * ||d+ - d||^2``, doubling ``sigma``
    otherwise. ``sigma`` starts at a norm estimate of ``H`` and then
    follows the Barzilai-Borwein ratio, clipped to ``[1e-10, 1e10]``.
    With ``tol`` set, stops early once an accepted step moves less than
    ``tol * max(1, ||d||)``.
    """
    if t < 1:
        raise ValueError("iteration budget must be >= 1")
    H = model.metric
    g = model.grad
    d = np.zeros(model.size)
    Hd = np.zeros(model.size)
    q = 0.0
    sigma = min(max(H.norm_estimate(), SIGMA_MIN), SIGMA_MAX)
    it = 0
    for it in range(1, t + 1):
        grad_q = g + Hd
        accepted = False
        for _ in range(SPARSA_MAX_INCREASES + 1):
            d_new = model.prox_step(d - grad_q / sigma, 1.0 / sigma)
            step = d_new - d
            ss = float(step @ step)
            if ss == 0.0:
                break
            Hd_new = H.matvec(d_new)
            with np.errstate(invalid="ignore", over="ignore"):
                q_new = float(g @ d_new + 0.5 * (d_new @ Hd_new)) + model.psi_change(d_new)
            if not math.isfinite(q_new):
                raise FloatingPointError("non-finite model value in SpaRSA")
            if q_new <= q - SPARSA_ACCEPT * 0.5 * sigma * ss:
                accepted = True
                break
            sigma = min(2.0 * sigma, SIGMA_MAX)
        if not accepted:
            # fixed point (step == 0) or no acceptable step within the budget
            it -= 1
            break
        dHd = float(step @ (Hd_new - Hd))
        d, Hd, q = d_new, Hd_new, q_new
        if tol is not None and math.sqrt(ss) <= tol * max(1.0, float(np.linalg.norm(d))):
            break
        sigma = min(max(dHd / ss, SIGMA_MIN), SIGMA_MAX)
    return _solution(model, d, Hd, it)


def certify_eta(model: QuadraticModel, d, reference_budget: int = REFERENCE_BUDGET) -> float:
    """Estimate the inexactness ``eta`` of ``d`` against a high-accuracy reference.

    ``eta_hat = (Q(d) - Q*) / (0 - Q*)`` clamped to ``[0, 1]``, where ``Q*``
    is the best of a long SpaRSA run, the closed form (scaled-identity
    metrics) and ``Q(d)`` itself.
    """
    if reference_budget < REFERENCE_BUDGET:
        raise ValueError(f"reference budget must be at least {REFERENCE_BUDGET}")
    qd = q_eval(model, d)
    candidates = [qd, sparsa_solve(model, reference_budget, tol=1e-15).q_value]
    if isinstance(model.metric, ScaledIdentity):
        candidates.append(solve_exact_identity(model).q_value)
    q_star = min(candidates)
    if q_star >= 0.0:
        return 0.0
    return float(min(max((qd - q_star) / (-q_star), 0.0), 1.0))
