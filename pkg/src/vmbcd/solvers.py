"""Outer loops: variable-metric BCD with line search, randomized BCD with
unit or short steps, and a FISTA baseline."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .data import make_rng
from .problems import CompositeProblem, SolverState, objective
from .sampling import BlockDistribution, BlockSampler, lipschitz_dist, optimal_dist, uniform_dist
from .subproblem import (
    DenseMetric,
    OperatorMetric,
    QuadraticModel,
    ScaledIdentity,
    SubproblemSolution,
    floor_metric,
    solve_exact_identity,
    sparsa_solve,
)
from .theory import TraceRecord, step_size_lower_bound, stationarity_G

ALGORITHMS = ("vm-bcd", "rcd-unit", "rcd-short", "fista")
SAMPLERS = ("uniform", "lipschitz", "optimal")
METRICS = ("hessian", "fixed", "identity")

EPS_FLOOR = 1e-10
DENSE_LIMIT = 64
REFRESH_EVERY = 10


class LineSearchError(RuntimeError):
    pass


@dataclass(frozen=True)
class LineSearchParams:
    beta: float = 0.5
    gamma: float = 1e-4
    max_backtracks: int = 60

    def __post_init__(self):
        if not (0 < self.beta < 1 and 0 < self.gamma < 1):
            raise ValueError("beta and gamma must lie in (0, 1)")


@dataclass(frozen=True)
class MetricPolicy:
    """How ``H_i`` is built for the variable-metric method.

    ``hessian``: diagonal Hessian block ``A_i^T D A_i`` (generalized for the
    squared hinge). Convex losses get ``eps I`` added. For the biweight the
    exact block Hessian is shifted by a multiple of ``I`` so its smallest
    eigenvalue is at least ``eps``; blocks wider than 64 clamp negative
    curvature at zero and add ``eps I`` instead.
    ``fixed``: ``kappa A_i^T A_i + eps I`` with ``kappa`` the global
    curvature bound of the loss. ``identity``: ``scale * I``.
    """

    kind: str = "hessian"
    eps: float = EPS_FLOOR
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in METRICS:
            raise ValueError(f"unknown metric {self.kind!r}")


@dataclass
class RunConfig:
    algorithm: str = "vm-bcd"
    sampler: str = "uniform"
    inner: int = 10
    line_search: LineSearchParams = field(default_factory=LineSearchParams)
    metric: MetricPolicy = field(default_factory=MetricPolicy)
    epochs: int = 10
    seed: int = 0
    f_star: float | None = None
    x0: np.ndarray | None = None
    tol_G: float | None = None
    target_gap: float | None = None
    record_time: bool = True
    check_drift: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.inner < 1:
            raise ValueError("inner budget must be >= 1")
        if isinstance(self.metric, str):
            self.metric = MetricPolicy(self.metric)


@dataclass
class StepInfo:
    """Per-iteration record handed to run callbacks."""

    k: int
    block: int
    model: QuadraticModel
    solution: SubproblemSolution
    alpha: float
    change: float
    trials: int
    L: float


@dataclass
class RunResult:
    trace: list[TraceRecord]
    state: SolverState
    config: RunConfig
    iterations: int = 0

    @property
    def final_objective(self) -> float:
        return self.state.objective


def line_search(problem: CompositeProblem, state: SolverState, i: int, d, delta: float,
                params: LineSearchParams = LineSearchParams(), Ad=None):
    """Backtracking along ``d`` on block ``i`` until sufficient decrease holds.

    Returns ``(alpha, change, trials)`` where ``change = F(x + alpha U_i d) - F(x)``.
    Each trial costs one pass over the rows block ``i`` touches; ``A_i d`` is
    formed once. If a trial step no longer changes ``x_i`` in floating point
    the search returns ``alpha = 0`` (a null step) instead of failing.
    """
    view = problem.A.block_view(i)
    rows = view.rows
    sl = problem.partition.block(i)
    xi = state.x[sl]
    if Ad is None:
        Ad = view.dense @ d
    z_r = state.z if rows is None else state.z[rows]
    reg = problem.reg
    loss = problem.loss
    alpha = 1.0
    for trial in range(1, params.max_backtracks + 2):
        if np.array_equal(xi + alpha * d, xi):
            return 0.0, 0.0, trial
        change = loss.change(z_r, alpha * Ad, rows) + reg.block_change(i, xi, alpha * d)
        if change <= alpha * params.gamma * delta:
            return alpha, change, trial
        alpha *= params.beta
    raise LineSearchError(f"no sufficient decrease after {params.max_backtracks} backtracks on block {i}")


def _apply(problem, state, i, step, A_step, change):
    view = problem.A.block_view(i)
    sl = problem.partition.block(i)
    state.x[sl] += step
    if view.rows is None:
        state.z += A_step
    else:
        state.z[view.rows] += A_step
    state.objective += change


class _MetricBuilder:
    def __init__(self, problem: CompositeProblem, policy: MetricPolicy):
        self.problem = problem
        self.policy = policy
        self._fixed: dict[int, object] = {}

    def __call__(self, state, i, z_r, view):
        policy = self.policy
        n_i = view.dense.shape[1]
        if policy.kind == "identity":
            return ScaledIdentity(policy.scale, n_i)
        if policy.kind == "fixed":
            met = self._fixed.get(i)
            if met is None:
                met = self._build_fixed(i, view)
                self._fixed[i] = met
            return met
        loss = self.problem.loss
        if n_i <= DENSE_LIMIT:
            D = loss.curvature(z_r, view.rows, clamp=False)
            H = view.dense.T @ (D[:, None] * view.dense)
            if loss.convex:
                # PSD already; the eps*I term is the m_i floor
                H = 0.5 * (H + H.T) + policy.eps * np.eye(n_i)
                ev = np.linalg.eigvalsh(H)
                return DenseMetric(H, max(float(ev[0]), policy.eps), float(ev[-1]))
            return floor_metric(H, policy.eps)
        # clamped curvature keeps the operator PSD, so adding eps*I suffices
        D = loss.curvature(z_r, view.rows)
        dense, eps = view.dense, policy.eps
        return OperatorMetric(lambda v: dense.T @ (D * (dense @ v)) + eps * v, n_i, eps)

    def _build_fixed(self, i, view):
        kappa = self.problem.loss.curvature_bound
        n_i = view.dense.shape[1]
        eps = self.policy.eps
        if n_i <= DENSE_LIMIT:
            H = kappa * (view.dense.T @ view.dense) + eps * np.eye(n_i)
            return DenseMetric(H)
        dense = view.dense
        return OperatorMetric(lambda v: kappa * (dense.T @ (dense @ v)) + eps * v, n_i, eps,
                              self.problem.lipschitz[i] + eps)

    def bounds(self):
        """Per-block ``(m_i, M_i)`` valid for every iterate."""
        prob = self.problem
        N = prob.num_blocks
        kind = self.policy.kind
        if kind == "identity":
            return np.full(N, self.policy.scale), np.full(N, self.policy.scale)
        if kind == "fixed":
            m = np.empty(N)
            M = np.empty(N)
            for i in range(N):
                met = self(None, i, None, prob.A.block_view(i))
                m[i] = met.m
                M[i] = met.norm_estimate()
            return m, M
        L = prob.lipschitz
        if not prob.loss.convex:
            # biweight curvature lies in [-C/2, 2C]; the identity shift adds at most L_i/4
            L = 1.25 * L
        return np.full(N, self.policy.eps), L + self.policy.eps


def block_distribution(problem: CompositeProblem, config: RunConfig) -> BlockDistribution:
    """The fixed sampling distribution a run uses."""
    N = problem.num_blocks
    if config.sampler == "uniform":
        return uniform_dist(N)
    L = problem.lipschitz
    if config.sampler == "lipschitz":
        return lipschitz_dist(L)
    # optimal: p_i proportional to M_i / alpha_bar_i
    if config.algorithm == "rcd-unit":
        return optimal_dist(L, np.ones(N))
    if config.algorithm == "rcd-short":
        Lmin = L.min()
        return optimal_dist(np.full(N, Lmin), Lmin / L)
    if config.algorithm == "fista":
        return uniform_dist(N)
    m, M = _MetricBuilder(problem, config.metric).bounds()
    ls = config.line_search
    return optimal_dist(M, step_size_lower_bound(m, L, ls.beta, ls.gamma, 0.0))


def _record(problem, state, epoch, config, stats, prev_support, t0):
    G = stationarity_G(problem, state)
    F = state.objective
    if config.f_star is None:
        rel = None
    else:
        denom = abs(config.f_star) if config.f_star != 0 else 1.0
        rel = (F - config.f_star) / denom
    support = state.x != 0
    changes = 0 if prev_support is None else int(np.count_nonzero(support != prev_support))
    nsteps = stats["steps"]
    return TraceRecord(
        epoch=epoch,
        F=F,
        rel_gap=rel,
        G_norm_sq=float(G @ G),
        mean_alpha=stats["alpha_sum"] / nsteps if nsteps else 0.0,
        sparsity=float(1.0 - np.count_nonzero(support) / max(1, len(support))),
        weighted_epoch=stats["weighted"],
        wall_ms=(time.perf_counter() - t0) * 1e3 if config.record_time else 0.0,
        trials=stats["trials"],
        support_changes=changes,
        null_steps=stats["null"],
    ), support


def _bcd_run(problem: CompositeProblem, config: RunConfig, step: Callable, callback=None) -> RunResult:
    t0 = time.perf_counter()
    state = problem.state_at(config.x0)
    N = problem.num_blocks
    dist = block_distribution(problem, config)
    sampler = BlockSampler(dist, make_rng(config.seed))
    cost = problem.A.block_nnz() / max(1, problem.A.nnz)
    stats = {"steps": 0, "alpha_sum": 0.0, "weighted": 0.0, "trials": 0, "null": 0}
    rec, support = _record(problem, state, 0, config, stats, None, t0)
    trace = [rec]
    k = 0
    for epoch in range(1, config.epochs + 1):
        stats.update(steps=0, alpha_sum=0.0, trials=0, null=0)
        for i in sampler.draw(N):
            i = int(i)
            alpha, trials = step(state, i, k, callback)
            stats["weighted"] += cost[i]
            stats["trials"] += trials
            if alpha > 0:
                stats["steps"] += 1
                stats["alpha_sum"] += alpha
            else:
                stats["null"] += 1
            k += 1
        if epoch % REFRESH_EVERY == 0:
            _refresh(problem, state, config.check_drift)
        rec, support = _record(problem, state, epoch, config, stats, support, t0)
        trace.append(rec)
        if _converged(rec, config):
            break
    return RunResult(trace, state, config, k)


def _converged(rec: TraceRecord, config: RunConfig) -> bool:
    if config.tol_G is not None and math.sqrt(rec.G_norm_sq) <= config.tol_G:
        return True
    return config.target_gap is not None and rec.rel_gap is not None and rec.rel_gap <= config.target_gap


def _refresh(problem, state, check):
    if check:
        drift = problem.drift(state)
        if drift > 1e-8 * (1.0 + np.max(np.abs(state.z), initial=0.0)):
            raise FloatingPointError(f"cached Ax drifted by {drift:g}")
    problem.refresh(state)
    fresh = objective(problem, state)
    # keep the tracked value when the fresh one differs only by rounding upward
    if fresh <= state.objective:
        state.objective = fresh


def _block_setup(problem, state, i):
    view = problem.A.block_view(i)
    rows = view.rows
    z_r = state.z if rows is None else state.z[rows]
    grad = view.dense.T @ problem.loss.grad(z_r, rows)
    return view, z_r, grad


def vm_bcd_run(problem: CompositeProblem, config: RunConfig, callback=None) -> RunResult:
    """Inexact variable-metric BCD: SpaRSA on the block model, then backtracking."""
    if config.algorithm != "vm-bcd":
        config = replace(config, algorithm="vm-bcd")
    build = _MetricBuilder(problem, config.metric)
    ls = config.line_search
    L = problem.lipschitz if callback is not None else None

    def step(state, i, k, cb):
        view, z_r, grad = _block_setup(problem, state, i)
        sl = problem.partition.block(i)
        metric = build(state, i, z_r, view)
        model = QuadraticModel(grad, metric, problem.reg, i, state.x[sl])
        sol = sparsa_solve(model, config.inner)
        if not np.any(sol.d):
            if cb is not None:
                cb(StepInfo(k, i, model, sol, 0.0, 0.0, 0, L[i]))
            return 0.0, 0
        Ad = view.dense @ sol.d
        alpha, change, trials = line_search(problem, state, i, sol.d, sol.delta, ls, Ad)
        if alpha == 0.0:
            if cb is not None:
                cb(StepInfo(k, i, model, sol, 0.0, 0.0, trials, L[i]))
            return 0.0, trials
        _apply(problem, state, i, alpha * sol.d, alpha * Ad, change)
        if cb is not None:
            cb(StepInfo(k, i, model, sol, alpha, change, trials, L[i]))
        return alpha, trials

    return _bcd_run(problem, config, step, callback)


def _fixed_step_run(problem, config, scale_of, step_of, callback):
    L = problem.lipschitz

    def step(state, i, k, cb):
        view, z_r, grad = _block_setup(problem, state, i)
        sl = problem.partition.block(i)
        n_i = len(grad)
        model = QuadraticModel(grad, ScaledIdentity(scale_of(i), n_i), problem.reg, i, state.x[sl])
        sol = solve_exact_identity(model)
        alpha = step_of(i)
        if not np.any(sol.d):
            if cb is not None:
                cb(StepInfo(k, i, model, sol, 0.0, 0.0, 0, L[i]))
            return 0.0, 0
        s = alpha * sol.d
        As = view.dense @ s
        change = problem.loss.change(z_r, As, view.rows) + problem.reg.block_change(i, state.x[sl], s)
        if change > 0.0:
            # descent is guaranteed in exact arithmetic; a positive value is rounding
            if cb is not None:
                cb(StepInfo(k, i, model, sol, 0.0, 0.0, 1, L[i]))
            return 0.0, 1
        _apply(problem, state, i, s, As, change)
        if cb is not None:
            cb(StepInfo(k, i, model, sol, alpha, change, 1, L[i]))
        return alpha, 1

    return _bcd_run(problem, config, step, callback)


def rcd_unit_run(problem: CompositeProblem, config: RunConfig, callback=None) -> RunResult:
    """Randomized BCD with ``H_i = L_i I``, exact block solves and unit steps."""
    if config.algorithm != "rcd-unit":
        config = replace(config, algorithm="rcd-unit")
    L = problem.lipschitz
    return _fixed_step_run(problem, config, lambda i: L[i], lambda i: 1.0, callback)


def rcd_short_run(problem: CompositeProblem, config: RunConfig, callback=None) -> RunResult:
    """Randomized BCD with ``H_i = L_min I`` and step ``L_min / L_i``."""
    if config.algorithm != "rcd-short":
        config = replace(config, algorithm="rcd-short")
    L = problem.lipschitz
    Lmin = float(L.min())
    return _fixed_step_run(problem, config, lambda i: Lmin, lambda i: Lmin / L[i], callback)


def fista_run(problem: CompositeProblem, config: RunConfig, callback=None) -> RunResult:
    """Accelerated proximal gradient with fixed step ``1/L_f``, no restarts.

    One iteration (one full gradient) is recorded as one epoch.
    """
    if not problem.loss.convex:
        raise ValueError("FISTA baseline is only defined for convex losses")
    t0 = time.perf_counter()
    A = problem.A
    part = problem.partition
    Lf = problem.global_lipschitz
    state = problem.state_at(config.x0)
    x = state.x.copy()
    y = x.copy()
    t = 1.0
    stats = {"steps": 0, "alpha_sum": 0.0, "weighted": 0.0, "trials": 0, "null": 0}
    rec, support = _record(problem, state, 0, config, stats, None, t0)
    trace = [rec]
    for epoch in range(1, config.epochs + 1):
        grad = A.rmatvec(problem.loss.grad(A.matvec(y)))
        x_new = problem.reg.prox(y - grad / Lf, 1.0 / Lf, part)
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t = x_new, t_new
        state.x = x.copy()
        state.z = A.matvec(x)
        state.objective = objective(problem, state)
        stats.update(steps=1, alpha_sum=1.0, weighted=float(epoch), trials=1)
        rec, support = _record(problem, state, epoch, config, stats, support, t0)
        trace.append(rec)
        if callback is not None:
            callback(epoch, state)
        if _converged(rec, config):
            break
    return RunResult(trace, state, config, len(trace) - 1)


RUNNERS = {
    "vm-bcd": vm_bcd_run,
    "rcd-unit": rcd_unit_run,
    "rcd-short": rcd_short_run,
    "fista": fista_run,
}


def run(problem: CompositeProblem, config: RunConfig, callback=None) -> RunResult:
    return RUNNERS[config.algorithm](problem, config, callback)


def reference_solution(problem: CompositeProblem, tol: float = 1e-10, max_epochs: int = 2000,
                       inner: int = 20, x0=None) -> tuple[np.ndarray, float]:
    """High-accuracy solution by VM-``inner`` with uniform sampling.

    Runs until ``||G|| <= tol`` or ``max_epochs``; returns ``(x*, F*)`` with
    ``F*`` recomputed from scratch.
    """
    cfg = RunConfig("vm-bcd", "uniform", inner=inner, epochs=max_epochs, tol_G=tol, x0=x0, record_time=False)
    res = vm_bcd_run(problem, cfg)
    x = res.state.x
    return x, problem.value(x)
