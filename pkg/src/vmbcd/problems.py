"""Losses, regularizers and the composite objective ``F(x) = g(Ax) + psi(x)``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import BlockPartition, Dataset, warn_degenerate

LOSS_KINDS = ("squared", "squared-hinge", "biweight")
REG_KINDS = ("l1", "group-l2", "zero")

LIPSCHITZ_FLOOR = 1e-12
POWER_TOL = 1e-10
POWER_MAXITER = 1000
POWER_INFLATION = 1.0 + 1e-8


def _check_finite(z):
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite input to loss")


class SeparableLoss:
    """Row-separable loss ``g(z) = sum_r C * phi(z_r; b_r)``.

    ``squared``: ``C/2 (z - b)^2``; ``squared-hinge``: ``C max(1 - b z, 0)^2``;
    ``biweight``: ``C t^2 / (1 + t^2)`` with ``t = z - b``.

    Every method takes an optional ``rows`` index array; ``z`` is then the
    already-restricted vector ``z[rows]``.
    """

    def __init__(self, kind: str, C: float, labels):
        if kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {kind!r}")
        if not C > 0:
            raise ValueError("C must be positive")
        self.kind = kind
        self.C = float(C)
        self.labels = np.asarray(labels, dtype=np.float64)

    @property
    def convex(self) -> bool:
        return self.kind != "biweight"

    @property
    def curvature_bound(self) -> float:
        """Upper bound on the (generalized) second derivative of each row term."""
        return self.C if self.kind == "squared" else 2.0 * self.C

    def _b(self, rows):
        return self.labels if rows is None else self.labels[rows]

    def terms(self, z, rows=None) -> np.ndarray:
        b = self._b(rows)
        C = self.C
        if self.kind == "squared":
            r = z - b
            return 0.5 * C * r * r
        if self.kind == "squared-hinge":
            h = np.maximum(1.0 - b * z, 0.0)
            return C * h * h
        t = z - b
        t2 = t * t
        return C * t2 / (1.0 + t2)

    def value(self, z, rows=None) -> float:
        _check_finite(z)
        return float(np.sum(self.terms(z, rows)))

    def grad(self, z, rows=None) -> np.ndarray:
        _check_finite(z)
        b = self._b(rows)
        C = self.C
        if self.kind == "squared":
            return C * (z - b)
        if self.kind == "squared-hinge":
            return -2.0 * C * b * np.maximum(1.0 - b * z, 0.0)
        t = z - b
        return 2.0 * C * t / (1.0 + t * t) ** 2

    def curvature(self, z, rows=None, clamp: bool = True) -> np.ndarray:
        """Per-row second derivative; the biweight one is clamped at zero unless ``clamp=False``."""
        _check_finite(z)
        b = self._b(rows)
        C = self.C
        if self.kind == "squared":
            return np.full(len(b), C)
        if self.kind == "squared-hinge":
            # generalized Hessian: zero at and beyond the kink
            return np.where(1.0 - b * z > 0.0, 2.0 * C, 0.0)
        t2 = (z - b) ** 2
        raw = -2.0 * C * (3.0 * t2 - 1.0) / (t2 + 1.0) ** 3
        return np.maximum(raw, 0.0) if clamp else raw

    def change(self, z, step, rows=None) -> float:
        """``g(z + step) - g(z)`` restricted to ``rows``."""
        b = self._b(rows)
        C = self.C
        if self.kind == "squared":
            return float(0.5 * C * np.dot(step, 2.0 * (z - b) + step))
        if self.kind == "squared-hinge":
            h0 = np.maximum(1.0 - b * z, 0.0)
            h1 = np.maximum(1.0 - b * (z + step), 0.0)
            # both active: h1 - h0 = -b * step exactly
            dh = np.where((h0 > 0) & (h1 > 0), -b * step, h1 - h0)
            return float(C * np.sum(dh * (h0 + h1)))
        t0 = z - b
        t1 = t0 + step
        # t1^2/(1+t1^2) - t0^2/(1+t0^2) = (t1^2 - t0^2) / ((1+t0^2)(1+t1^2))
        return float(C * np.sum(step * (2.0 * t0 + step) / ((1.0 + t0 * t0) * (1.0 + t1 * t1))))


def loss_eval(loss: SeparableLoss, z) -> float:
    return loss.value(np.asarray(z, dtype=np.float64))


def loss_grad(loss: SeparableLoss, z) -> np.ndarray:
    return loss.grad(np.asarray(z, dtype=np.float64))


def loss_curv_diag(loss: SeparableLoss, z, clamp: bool = True) -> np.ndarray:
    return loss.curvature(np.asarray(z, dtype=np.float64), clamp=clamp)


def soft_threshold(v, thresh):
    return np.sign(v) * np.maximum(np.abs(v) - thresh, 0.0)


def group_shrink(v, thresh):
    nrm = float(np.linalg.norm(v))
    if nrm <= thresh:
        return np.zeros_like(v)
    return (1.0 - thresh / nrm) * v


class SeparableRegularizer:
    """Block-separable ``psi(x) = sum_i psi_i(x_i)``.

    ``l1``: ``lam_i ||x_i||_1``; ``group-l2``: ``lam_i ||x_i||_2``; ``zero``: 0.
    ``weights`` is a scalar or one nonnegative weight per block.
    """

    def __init__(self, kind: str, weights=1.0):
        if kind not in REG_KINDS:
            raise ValueError(f"unknown regularizer {kind!r}")
        w = np.asarray(weights, dtype=np.float64)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        self.kind = kind
        self.weights = w

    def weight(self, i: int) -> float:
        return float(self.weights) if self.weights.ndim == 0 else float(self.weights[i])

    def _block_weights(self, partition: BlockPartition) -> np.ndarray:
        if self.weights.ndim == 0:
            return np.full(partition.num_blocks, float(self.weights))
        if len(self.weights) != partition.num_blocks:
            raise ValueError("need one weight per block")
        return self.weights

    def block_value(self, i: int, xi) -> float:
        if self.kind == "zero":
            return 0.0
        lam = self.weight(i)
        if self.kind == "l1":
            return lam * float(np.sum(np.abs(xi)))
        return lam * float(np.linalg.norm(xi))

    def block_change(self, i: int, xi, s) -> float:
        """``psi_i(x_i + s) - psi_i(x_i)`` without cancellation for small ``s``."""
        if self.kind == "zero":
            return 0.0
        lam = self.weight(i)
        xi = np.asarray(xi, dtype=np.float64)
        s = np.asarray(s, dtype=np.float64)
        y = xi + s
        if self.kind == "l1":
            # where the sign is kept, |x + s| - |x| = sign(x) * s exactly
            keep = np.sign(y) == np.sign(xi)
            diff = np.where(keep, np.sign(xi) * s, np.abs(y) - np.abs(xi))
            return lam * float(np.sum(diff))
        nx = float(np.linalg.norm(xi))
        ny = float(np.linalg.norm(y))
        if nx + ny == 0.0:
            return 0.0
        return lam * float(s @ (2.0 * xi + s)) / (nx + ny)

    def value(self, x, partition: BlockPartition) -> float:
        if self.kind == "zero":
            return 0.0
        lam = self._block_weights(partition)
        if self.kind == "l1":
            return float(np.dot(np.repeat(lam, partition.sizes), np.abs(x)))
        norms = np.sqrt(np.add.reduceat(x * x, partition.offsets[:-1]))
        return float(np.dot(lam, norms))

    def block_prox(self, i: int, v, t: float) -> np.ndarray:
        """``argmin_u t*psi_i(u) + 1/2 ||u - v||^2``."""
        if self.kind == "zero":
            return np.array(v, dtype=np.float64, copy=True)
        thresh = t * self.weight(i)
        if self.kind == "l1":
            return soft_threshold(v, thresh)
        return group_shrink(v, thresh)

    def prox(self, v, t: float, partition: BlockPartition) -> np.ndarray:
        """Prox of ``t*psi`` over the whole vector."""
        v = np.asarray(v, dtype=np.float64)
        if self.kind == "zero":
            return v.copy()
        lam = self._block_weights(partition)
        if self.kind == "l1":
            return soft_threshold(v, t * np.repeat(lam, partition.sizes))
        norms = np.sqrt(np.add.reduceat(v * v, partition.offsets[:-1]))
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(norms > t * lam, 1.0 - t * lam / norms, 0.0)
        return v * np.repeat(scale, partition.sizes)


def reg_value(reg: SeparableRegularizer, partition: BlockPartition, x) -> float:
    return reg.value(np.asarray(x, dtype=np.float64), partition)


def reg_block_value(reg: SeparableRegularizer, i: int, xi) -> float:
    return reg.block_value(i, np.asarray(xi, dtype=np.float64))


def power_iteration(matvec, n: int, tol: float = POWER_TOL, maxiter: int = POWER_MAXITER, v0=None) -> float:
    """Largest eigenvalue of a symmetric PSD operator, no inflation applied."""
    v = np.ones(n) if v0 is None else np.asarray(v0, dtype=np.float64).copy()
    nv = np.linalg.norm(v)
    if nv == 0:
        v = np.ones(n)
        nv = math.sqrt(n)
    v /= nv
    lam = 0.0
    for _ in range(maxiter):
        w = matvec(v)
        lam_new = float(np.dot(v, w))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        if abs(lam_new - lam) <= tol * abs(lam_new):
            return max(lam_new, float(nw))
        lam = lam_new
    return max(lam, float(nw))


def spectral_norm_sq(dense: np.ndarray) -> float:
    """``sigma_max(B)^2`` by power iteration on ``B^T B``, inflated to stay an upper bound."""
    if dense.shape[1] == 1:
        return float(np.dot(dense[:, 0], dense[:, 0]))
    gram = dense.T @ dense
    # start from column norms: positive overlap with the top eigenvector of a Gram matrix
    v0 = np.sqrt(np.diag(gram)) + 1e-3
    return power_iteration(lambda v: gram @ v, gram.shape[0], v0=v0) * POWER_INFLATION


@dataclass
class SolverState:
    """Iterate ``x`` with the cached product ``z = A x`` and objective value."""

    x: np.ndarray
    z: np.ndarray
    objective: float

    def copy(self) -> "SolverState":
        return SolverState(self.x.copy(), self.z.copy(), self.objective)


class CompositeProblem:
    """``F(x) = g(Ax) + sum_i psi_i(x_i)`` over the dataset's block partition."""

    def __init__(self, dataset: Dataset, loss: SeparableLoss, reg: SeparableRegularizer):
        self.dataset = dataset
        self.A = dataset.matrix
        self.loss = loss
        self.reg = reg
        if len(loss.labels) != self.A.shape[0]:
            raise ValueError("loss labels must match the row count")
        self._lipschitz = None
        self._global_L = None

    @property
    def partition(self) -> BlockPartition:
        return self.A.partition

    @property
    def num_blocks(self) -> int:
        return self.A.partition.num_blocks

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def lipschitz(self) -> np.ndarray:
        if self._lipschitz is None:
            self._lipschitz = np.array([block_lipschitz(self, i) for i in range(self.num_blocks)])
        return self._lipschitz

    @property
    def L_max(self) -> float:
        return float(self.lipschitz.max())

    @property
    def L_min(self) -> float:
        return float(self.lipschitz.min())

    @property
    def L_avg(self) -> float:
        return float(self.lipschitz.mean())

    @property
    def global_lipschitz(self) -> float:
        """``kappa * sigma_max(A)^2`` (inflated power-iteration estimate)."""
        if self._global_L is None:
            A = self.A.to_scipy()
            At = A.T.tocsr()
            v0 = np.sqrt(self.A.column_norms_sq()) + 1e-3
            lam = power_iteration(lambda v: At @ (A @ v), self.n, v0=v0)
            self._global_L = max(self.loss.curvature_bound * lam * POWER_INFLATION, LIPSCHITZ_FLOOR)
        return self._global_L

    def state_at(self, x=None) -> SolverState:
        x = np.zeros(self.n) if x is None else np.array(x, dtype=np.float64, copy=True)
        z = self.A.matvec(x)
        st = SolverState(x, z, 0.0)
        st.objective = objective(self, st)
        return st

    def value(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return self.loss.value(self.A.matvec(x)) + self.reg.value(x, self.partition)

    def smooth_value(self, x) -> float:
        return self.loss.value(self.A.matvec(np.asarray(x, dtype=np.float64)))

    def full_gradient(self, state_or_x) -> np.ndarray:
        z = state_or_x.z if isinstance(state_or_x, SolverState) else self.A.matvec(state_or_x)
        return self.A.rmatvec(self.loss.grad(z))

    def drift(self, state: SolverState) -> float:
        return float(np.max(np.abs(state.z - self.A.matvec(state.x)), initial=0.0))

    def refresh(self, state: SolverState) -> None:
        """Recompute ``z = Ax`` from scratch to remove accumulated drift."""
        state.z = self.A.matvec(state.x)


def make_problem(dataset: Dataset, loss: str, C: float = 1.0, reg: str = "l1", lam=1.0) -> CompositeProblem:
    return CompositeProblem(dataset, SeparableLoss(loss, C, dataset.labels), SeparableRegularizer(reg, lam))


def lasso(dataset: Dataset, C: float = 1.0, lam: float = 1.0) -> CompositeProblem:
    return make_problem(dataset, "squared", C, "l1", lam)


def objective(problem: CompositeProblem, state: SolverState) -> float:
    return problem.loss.value(state.z) + problem.reg.value(state.x, problem.partition)


def partial_gradient(problem: CompositeProblem, state: SolverState, i: int) -> np.ndarray:
    """``A_i^T grad g(z)`` using only the rows block ``i`` touches."""
    view = problem.A.block_view(i)
    if view.rows is None:
        return view.dense.T @ problem.loss.grad(state.z)
    return view.dense.T @ problem.loss.grad(state.z[view.rows], view.rows)


def block_lipschitz(problem: CompositeProblem, i: int) -> float:
    view = problem.A.block_view(i)
    s2 = spectral_norm_sq(view.dense)
    if s2 <= 0.0:
        warn_degenerate(i)
        return LIPSCHITZ_FLOOR
    return max(problem.loss.curvature_bound * s2, LIPSCHITZ_FLOOR)


def block_curvature(problem: CompositeProblem, state: SolverState, i: int) -> np.ndarray:
    view = problem.A.block_view(i)
    if view.rows is None:
        return problem.loss.curvature(state.z)
    return problem.loss.curvature(state.z[view.rows], view.rows)


def hessian_block_matvec(problem: CompositeProblem, state: SolverState, i: int, v) -> np.ndarray:
    """``A_i^T D A_i v`` with ``D`` the (clamped) loss curvature at ``z``."""
    view = problem.A.block_view(i)
    D = block_curvature(problem, state, i)
    return view.dense.T @ (D * (view.dense @ v))


def hessian_block(problem: CompositeProblem, state: SolverState, i: int) -> np.ndarray:
    """Dense ``A_i^T D A_i``."""
    view = problem.A.block_view(i)
    D = block_curvature(problem, state, i)
    return view.dense.T @ (D[:, None] * view.dense)
