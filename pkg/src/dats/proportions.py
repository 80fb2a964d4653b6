"""Target label-proportion estimation by mean matching in feature space."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateGeometryError, IncompleteStatsError, UsageError
from .nn import softmax, softmax_backward

BETA_FLOOR = 1e-6


def check_simplex(values, atol: float = 1e-9) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise UsageError("simplex vector must be a non-empty 1-D array")
    if (v < -atol).any() or abs(v.sum() - 1.0) > atol:
        raise UsageError(f"not on the simplex: {v}")
    return v


def project_to_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def source_proportions(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size == 0:
        raise UsageError("cannot compute proportions of an empty label set")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise UsageError(f"labels must lie in [0, {n_classes})")
    return np.bincount(labels, minlength=n_classes) / labels.size


@dataclass
class ClassMeans:
    """Columns are class-conditional feature means; absent classes hold NaN."""

    means: np.ndarray  # (d, L)
    counts: np.ndarray  # (L,)

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0

    @property
    def complete(self) -> bool:
        return bool(self.present.all())

    def filled(self, fallback: np.ndarray) -> "ClassMeans":
        """Copy with absent columns taken from ``fallback`` (d x L); counts kept."""
        means = self.means.copy()
        absent = ~self.present
        means[:, absent] = np.asarray(fallback)[:, absent]
        return ClassMeans(means, self.counts.copy())


def class_conditional_means(features, labels, n_classes: int) -> ClassMeans:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    counts = np.bincount(labels, minlength=n_classes)
    sums = np.zeros((n_classes, features.shape[1]))
    np.add.at(sums, labels, features)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts[:, None]
    means[counts == 0] = np.nan
    return ClassMeans(means.T, counts)


def mean_matching_loss(
    means: Sequence[ClassMeans],
    lam,
    gamma_logits,
    target_mean,
    column_masks: Sequence[np.ndarray] | None = None,
) -> tuple[float, np.ndarray]:
    """Weighted squared residual of mean matching and its gradient w.r.t. logits.

    ``column_masks[s]`` marks the columns of source ``s`` allowed to pass
    gradient; columns filled in from elsewhere for a batch missing that class
    are masked out.
    """
    lam = np.asarray(lam, dtype=np.float64)
    logits = np.asarray(gamma_logits, dtype=np.float64)
    mu = np.asarray(target_mean, dtype=np.float64)
    if len(means) != lam.size:
        raise UsageError(f"{len(means)} sources but {lam.size} domain weights")
    gamma = softmax(logits)
    loss = 0.0
    grad_gamma = np.zeros_like(gamma)
    for s, cm in enumerate(means):
        m = cm.means
        if m.shape != (mu.size, gamma.size):
            raise UsageError(
                f"class means of source {s} have shape {m.shape}, "
                f"expected {(mu.size, gamma.size)}"
            )
        if not np.isfinite(m).all():
            raise IncompleteStatsError(f"source {s} has absent class columns")
        resid = m @ gamma - mu
        loss += lam[s] * float(resid @ resid)
        g = 2.0 * lam[s] * (m.T @ resid)
        if column_masks is not None:
            g = g * column_masks[s]
        grad_gamma += g
    return loss, softmax_backward(gamma, grad_gamma)


def _stack(means, weights) -> tuple[np.ndarray, np.ndarray | None]:
    if isinstance(means, ClassMeans) or (isinstance(means, np.ndarray) and means.ndim == 2):
        means = [means]
    blocks = []
    for cm in means:
        m = cm.means if isinstance(cm, ClassMeans) else np.atleast_2d(np.asarray(cm, dtype=np.float64))
        if not np.isfinite(m).all():
            raise IncompleteStatsError("class means contain absent columns")
        blocks.append(m)
    if weights is None:
        weights = np.ones(len(blocks))
    return blocks, np.asarray(weights, dtype=np.float64)


def solve_proportions_closed_form(means, target_mean, weights=None) -> np.ndarray:
    """Exact minimiser of sum_s w_s ||M_s g - mu||^2 over the probability simplex.

    ``means`` is a ClassMeans, a d x L array, or a list of either (one per
    source).  The unconstrained least-squares solution is used directly when
    it lies on the simplex; otherwise a primal active-set QP solve finds the
    constrained optimum.
    """
    blocks, w = _stack(means, weights)
    mu = np.asarray(target_mean, dtype=np.float64)
    n_classes = blocks[0].shape[1]
    gram = sum(wi * m.T @ m for wi, m in zip(w, blocks))
    rhs = sum(wi * m.T @ mu for wi, m in zip(w, blocks))
    if not _identifiable(gram):
        raise DegenerateGeometryError(
            "M^T M is singular on the simplex: class means are affinely dependent"
        )
    scale = max(np.abs(gram).max(), np.finfo(float).tiny)
    if np.linalg.cond(gram / scale) < 1e12:
        free = np.linalg.solve(gram, rhs)
        if abs(free.sum() - 1.0) < 1e-12 and (free >= 0).all():
            return free
    return _simplex_qp(gram, rhs, n_classes)


def _identifiable(gram, rcond=1e-12) -> bool:
    """True when the quadratic is strictly convex along the simplex."""
    n = gram.shape[0]
    if n == 1:
        return True
    # basis of {v : sum(v) = 0}
    basis = np.vstack([-np.ones((1, n - 1)), np.eye(n - 1)])
    reduced = basis.T @ gram @ basis
    ev = np.linalg.eigvalsh(reduced)
    return ev.min() > rcond * max(ev.max(), np.finfo(float).tiny)


def _equality_qp(gram, rhs, idx):
    """Minimise 0.5 g'Qg - c'g on the free set ``idx`` subject to sum(g) = 1."""
    k = len(idx)
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = gram[np.ix_(idx, idx)]
    kkt[:k, k] = 1.0
    kkt[k, :k] = 1.0
    sol = np.linalg.solve(kkt, np.r_[rhs[idx], 1.0])
    return sol[:k], sol[k]


def _simplex_qp(gram, rhs, n, tol=1e-12, max_iter=500):
    # objective 0.5 g'Qg - c'g with Q = gram, c = rhs (the least-squares
    # problem scaled by 1/2); start from the feasible barycentre.
    g = np.full(n, 1.0 / n)
    active = np.zeros(n, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(~active)
        sub, _ = _equality_qp(gram, rhs, idx)
        target = np.zeros(n)
        target[idx] = sub
        step = target - g
        if np.abs(step).max() <= tol:
            grad = gram @ g - rhs
            nu = -grad[idx].mean() if idx.size else 0.0
            mult = grad + nu
            mult[~active] = np.inf
            j = int(np.argmin(mult))
            if mult[j] >= -tol:
                return np.maximum(g, 0.0) / np.maximum(g, 0.0).sum()
            active[j] = False
            continue
        neg = (step < 0) & ~active
        t, block = 1.0, -1
        for j in np.flatnonzero(neg):
            tj = -g[j] / step[j]
            if tj < t:
                t, block = tj, j
        g = g + t * step
        if block >= 0:
            g[block] = 0.0
            active[block] = True
    raise RuntimeError("active-set solver did not converge")


def gradient_path_proportions(
    means,
    target_mean,
    weights=None,
    learning_rate: float | None = None,
    max_iter: int = 200_000,
    tol: float = 1e-13,
    init_logits=None,
) -> np.ndarray:
    """Minimise the mean-matching loss by gradient descent on softmax logits.

    With ``learning_rate=None`` the step is scaled by the largest eigenvalue
    of the weighted Gram matrix so the descent is stable for any feature scale.
    """
    blocks, w = _stack(means, weights)
    mu = np.asarray(target_mean, dtype=np.float64)
    cms = [ClassMeans(m, np.ones(m.shape[1])) for m in blocks]
    n_classes = blocks[0].shape[1]
    if learning_rate is None:
        gram = sum(wi * m.T @ m for wi, m in zip(w, blocks))
        learning_rate = 1.0 / max(np.linalg.eigvalsh(gram).max(), 1e-300)
    logits = np.zeros(n_classes) if init_logits is None else np.array(init_logits, float)
    prev = np.inf
    for _ in range(max_iter):
        loss, grad = mean_matching_loss(cms, w, logits, mu)
        logits -= learning_rate * grad
        if abs(prev - loss) <= tol * max(1.0, abs(loss)) and np.abs(grad).max() < 1e-10:
            break
        prev = loss
    return softmax(logits)


@dataclass
class BetaWeights:
    values: np.ndarray
    l1: float


def beta_weights(gamma_target, gamma_source, floor: float = BETA_FLOOR) -> BetaWeights:
    if floor <= 0:
        raise UsageError("beta floor must be positive")
    gt = np.asarray(gamma_target, dtype=np.float64)
    gs = np.asarray(gamma_source, dtype=np.float64)
    values = gt / np.maximum(gs, floor)
    return BetaWeights(values, float(np.abs(values).sum()))
