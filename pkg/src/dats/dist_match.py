"""Kernel estimate of a Pearson-type f-divergence between reweighted source and target.

Each source domain gets L + 1 radial-basis anchors: its L class-conditional
feature means and its overall feature mean.  With kernel features ``phi``,

    A = E_target[phi phi^T]                 (L+1, L+1)
    B[:, l] = E_source[phi | y = l]         (L+1, L)

the ratio model ``r(h) = alpha^T phi(h)`` has ridge-optimal coefficients
``alpha = (A + delta I)^{-1} B gamma``, and plugging those back into the dual
lower bound ``-1/2 alpha^T A alpha + alpha^T B gamma`` gives the objective
minimised over the label proportions ``gamma``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.distance import pdist

from .errors import DegenerateGridError, IncompleteStatsError, UsageError
from .nn import softmax, softmax_backward

RIDGE_SCALE = 1e-3


@dataclass
class KernelGrid:
    points: np.ndarray  # (L+1, d): class means then the domain mean
    bandwidth: float
    degenerate: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise UsageError(f"bandwidth must be finite and positive, got {self.bandwidth}")


@dataclass
class MatchStats:
    A: np.ndarray  # (L+1, L+1)
    B: np.ndarray  # (L+1, L)
    delta: float

    @property
    def regularised(self) -> np.ndarray:
        return self.A + self.delta * np.eye(self.A.shape[0])


def median_bandwidth(features, max_samples: int = 500, rng=None) -> float:
    """Median pairwise Euclidean distance, on a subsample when ``features`` is large."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] > max_samples:
        rng = np.random.default_rng(0) if rng is None else rng
        x = x[rng.choice(x.shape[0], max_samples, replace=False)]
    d = pdist(x)
    d = d[d > 0]
    if d.size == 0:
        return 1.0
    return float(np.median(d))


def build_grid(features, labels, n_classes: int, bandwidth) -> KernelGrid:
    """Anchors at the class-conditional means and the overall mean of one domain.

    ``bandwidth`` is a positive float or ``"median"``.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    counts = np.bincount(y, minlength=n_classes)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise DegenerateGridError(f"class {missing[0]} has no samples in this domain")
    points = np.vstack([x[y == l].mean(axis=0) for l in range(n_classes)] + [x.mean(axis=0)])
    if isinstance(bandwidth, str):
        if bandwidth != "median":
            raise UsageError(f"unknown bandwidth policy {bandwidth!r}")
        bandwidth = median_bandwidth(x)
    degenerate = bool(np.ptp(points, axis=0).max() == 0.0)
    return KernelGrid(points, float(bandwidth), degenerate)


def kernel_features(h, grid: KernelGrid) -> np.ndarray:
    """RBF responses of ``h`` (vector or n x d matrix) at each grid point."""
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    h2 = np.atleast_2d(h)
    sq = (
        (h2 * h2).sum(axis=1)[:, None]
        - 2.0 * h2 @ grid.points.T
        + (grid.points * grid.points).sum(axis=1)[None, :]
    )
    phi = np.exp(-np.maximum(sq, 0.0) / (2.0 * grid.bandwidth**2))
    return phi[0] if single else phi


def default_ridge(A: np.ndarray, scale: float = RIDGE_SCALE) -> float:
    delta = scale * float(np.trace(A)) / A.shape[0]
    return delta if delta > 0 else scale


def estimate_match_stats(
    target_features, source_features, source_labels, grid: KernelGrid, delta=None,
    n_classes: int | None = None,
) -> MatchStats:
    target_features = np.asarray(target_features, dtype=np.float64)
    if target_features.shape[0] == 0:
        raise IncompleteStatsError("no target samples")
    n_classes = grid.points.shape[0] - 1 if n_classes is None else n_classes
    phi_t = kernel_features(target_features, grid)
    A = phi_t.T @ phi_t / phi_t.shape[0]
    A = 0.5 * (A + A.T)
    y = np.asarray(source_labels, dtype=np.intp)
    counts = np.bincount(y, minlength=n_classes)
    if (counts == 0).any():
        raise IncompleteStatsError(
            f"class {np.flatnonzero(counts == 0)[0]} has no source samples"
        )
    phi_s = kernel_features(source_features, grid)
    B = np.zeros((phi_s.shape[1], n_classes))
    np.add.at(B.T, y, phi_s)
    B /= counts[None, :]
    return MatchStats(A, B, default_ridge(A) if delta is None else float(delta))


class MatchStatsAccumulator:
    """Streams minibatches into running sums; ``finalize`` equals the batch estimate."""

    def __init__(self, grid: KernelGrid, n_classes: int):
        self.grid = grid
        k = grid.points.shape[0]
        self._a = np.zeros((k, k))
        self._n_target = 0
        self._b = np.zeros((k, n_classes))
        self._counts = np.zeros(n_classes, dtype=np.int64)

    def add_target(self, features) -> None:
        phi = kernel_features(np.atleast_2d(features), self.grid)
        self._a += phi.T @ phi
        self._n_target += phi.shape[0]

    def add_source(self, features, labels) -> None:
        phi = kernel_features(np.atleast_2d(features), self.grid)
        y = np.asarray(labels, dtype=np.intp)
        np.add.at(self._b.T, y, phi)
        self._counts += np.bincount(y, minlength=self._counts.size)

    def finalize(self, delta=None) -> MatchStats:
        if self._n_target == 0 or (self._counts == 0).any():
            raise IncompleteStatsError("accumulator is missing target or class samples")
        A = self._a / self._n_target
        A = 0.5 * (A + A.T)
        B = self._b / self._counts[None, :]
        return MatchStats(A, B, default_ridge(A) if delta is None else float(delta))


def optimal_alpha(stats: MatchStats, gamma) -> np.ndarray:
    return np.linalg.solve(stats.regularised, stats.B @ np.asarray(gamma, dtype=np.float64))


def dual_surrogate(stats: MatchStats, alpha, gamma, ridge: bool = True) -> float:
    """Finite-sample dual bound ``-1/2 a'(A [+ delta I])a + a'B gamma`` (constant dropped)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    quad = stats.regularised if ridge else stats.A
    return float(-0.5 * alpha @ quad @ alpha + alpha @ stats.B @ np.asarray(gamma, float))


def divergence_value(stats: MatchStats, gamma) -> tuple[float, np.ndarray]:
    """Objective and gradient as a function of the proportions themselves."""
    gamma = np.asarray(gamma, dtype=np.float64)
    v = stats.B @ gamma
    u = np.linalg.solve(stats.regularised, v)
    Au = stats.A @ u
    value = float(-0.5 * u @ Au + v @ u)
    # C symmetric: d/dv [-1/2 v'C^-1 A C^-1 v + v'C^-1 v] = -C^-1 A u + 2u
    grad_v = 2.0 * u - np.linalg.solve(stats.regularised, Au)
    return value, stats.B.T @ grad_v


def f_divergence_objective(stats: MatchStats, gamma_logits) -> tuple[float, np.ndarray]:
    gamma = softmax(np.asarray(gamma_logits, dtype=np.float64))
    value, grad_gamma = divergence_value(stats, gamma)
    return value, softmax_backward(gamma, grad_gamma)


def combined_match_loss(
    stats: Sequence[MatchStats], lam, gamma_logits
) -> tuple[float, np.ndarray]:
    lam = np.asarray(lam, dtype=np.float64)
    if len(stats) != lam.size:
        raise UsageError(f"{len(stats)} match stats but {lam.size} domain weights")
    total = 0.0
    grad = np.zeros(np.asarray(gamma_logits).shape)
    for w, st in zip(lam, stats):
        v, g = f_divergence_objective(st, gamma_logits)
        total += w * v
        grad += w * g
    return total, grad
