"""Block-selection distributions and alias-table sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SUM_TOL = 1e-12


@dataclass(frozen=True)
class BlockDistribution:
    probabilities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.ndim != 1 or len(p) == 0:
            raise ValueError("need a nonempty probability vector")
        if np.any(~(p > 0)):
            raise ValueError("probabilities must be strictly positive")
        if abs(p.sum() - 1.0) > SUM_TOL:
            raise ValueError("probabilities must sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, "probabilities", p)

    def __len__(self):
        return len(self.probabilities)

    @property
    def p(self) -> np.ndarray:
        return self.probabilities

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.probabilities == self.probabilities[0]))


def _normalized(w) -> BlockDistribution:
    w = np.asarray(w, dtype=np.float64)
    return BlockDistribution(w / np.sum(w))


def uniform_dist(N: int) -> BlockDistribution:
    if N < 1:
        raise ValueError("N must be >= 1")
    return BlockDistribution(np.full(N, 1.0 / N))


def lipschitz_dist(L) -> BlockDistribution:
    """``p_i = L_i / sum_j L_j``."""
    L = np.asarray(L, dtype=np.float64)
    if np.any(~(L > 0)) or not np.all(np.isfinite(L)):
        raise ValueError("Lipschitz constants must be positive and finite")
    return _normalized(L)


def optimal_dist(M, alpha_bar) -> BlockDistribution:
    """``p_i`` proportional to ``M_i / alpha_bar_i``."""
    M = np.asarray(M, dtype=np.float64)
    a = np.asarray(alpha_bar, dtype=np.float64)
    if np.any(~(M > 0)):
        raise ValueError("M must be positive")
    if np.any(~(a > 0)) or np.any(a > 1):
        raise ValueError("alpha_bar must lie in (0, 1]")
    return _normalized(M / a)


class AliasTable:
    """Walker-style alias table.

    Bucket ``k`` (drawn with probability ``1/N``) returns ``lower[k]`` with
    probability ``threshold[k]`` and ``upper[k]`` otherwise.

    Construction pairs every light index (scaled mass ``N p_i <= 1``) with a
    heavy one. Heavy index ``k`` absorbs light indices in order until its
    excess is used up, then becomes light itself and is paired with heavy
    index ``k + 1``. Heavy ``k`` is exhausted exactly when the running
    deficit of the light indices reaches the running excess of heavy
    ``1..k``, so all pairings follow from one ``searchsorted`` over the two
    cumulative sums. The sums are kept in extended precision; the last heavy
    index absorbs any rounding residue and gets threshold 1.
    """

    def __init__(self, dist: BlockDistribution | np.ndarray):
        if not isinstance(dist, BlockDistribution):
            dist = BlockDistribution(dist)
        p = dist.probabilities
        N = len(p)
        self.N = N
        q = p * N
        light = np.flatnonzero(q <= 1)
        heavy = np.flatnonzero(q > 1)
        s, m = len(light), len(heavy)
        if m == 0:
            upper = lower = np.arange(N, dtype=np.int64)
            threshold = np.ones(N)
        else:
            D = np.cumsum(1 - q[light])
            E = np.cumsum(q[heavy] - 1)
            # rank[k] = #{j : D_j < E_k}. Both sums are sorted, so a stable
            # sort of their concatenation is a single linear-time merge; E goes
            # first so ties count as "not below"
            order = np.argsort(np.concatenate([E, D]), kind="stable")
            pos = np.empty(m + s, dtype=np.int64)
            pos[order] = np.arange(m + s)
            rank = pos[:m] - np.arange(m)
            # light indices absorbed by heavy 1..k
            count = np.minimum(rank + 1, s)
            count[-1] = s
            # owner[j] = #{k : count_k <= j}
            owner = np.cumsum(np.bincount(count, minlength=s + 1))[:s]
            D_at = D[np.maximum(count - 1, 0)] if s else np.zeros(m)
            D_at = np.where(count > 0, D_at, 0)
            heavy_thr = 1 - (D_at - E)
            heavy_thr[-1] = 1
            lower = np.concatenate([light, heavy]).astype(np.int64)
            upper = np.concatenate([heavy[owner], heavy[1:], heavy[-1:]]).astype(np.int64)
            threshold = np.concatenate([q[light], heavy_thr]).astype(np.float64)
        threshold = np.clip(threshold, 0.0, 1.0)
        self.upper = upper
        self.lower = lower
        self.threshold = threshold
        for arr in (upper, lower, threshold):
            arr.setflags(write=False)

    def reconstruct(self) -> np.ndarray:
        """Probability mass the table assigns to each index."""
        out = np.zeros(self.N)
        np.add.at(out, self.lower, self.threshold / self.N)
        np.add.at(out, self.upper, (1.0 - self.threshold) / self.N)
        return out

    def sample(self, rng: np.random.Generator, size: int | None = None):
        """Draw one index (``size=None``) or an array of ``size`` indices."""
        if size is None:
            k = int(rng.integers(self.N))
            return int(self.lower[k]) if rng.random() < self.threshold[k] else int(self.upper[k])
        k = rng.integers(self.N, size=size)
        u = rng.random(size)
        return np.where(u < self.threshold[k], self.lower[k], self.upper[k])


def alias_init(dist: BlockDistribution) -> AliasTable:
    return AliasTable(dist)


def alias_sample(table: AliasTable, rng: np.random.Generator) -> int:
    return table.sample(rng)


class BlockSampler:
    """Fixed-distribution block sampler drawing indices in batches."""

    def __init__(self, dist: BlockDistribution, rng: np.random.Generator):
        self.dist = dist
        self.rng = rng
        self.N = len(dist)
        self._uniform = dist.is_uniform
        self._table = None if self._uniform else AliasTable(dist)

    def draw(self, size: int) -> np.ndarray:
        if self._uniform:
            return self.rng.integers(self.N, size=size)
        return self._table.sample(self.rng, size)
