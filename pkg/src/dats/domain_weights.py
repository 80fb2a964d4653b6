"""Source-domain relevance weights from the domain adapter's last hidden layer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import UsageError
from .nn import softmax


@dataclass
class DomainWeightState:
    lam: np.ndarray
    rho: float = 0.9

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64)
        if not 0.0 <= self.rho < 1.0:
            raise UsageError("smoothing coefficient must lie in [0, 1)")

    @classmethod
    def uniform(cls, n_sources: int, rho: float = 0.9) -> "DomainWeightState":
        return cls(np.full(n_sources, 1.0 / n_sources), rho)


def adapter_hidden_means(
    source_z: Sequence[np.ndarray], target_z: np.ndarray
) -> tuple[list[np.ndarray | None], np.ndarray]:
    """Per-domain mean activation; an empty source batch yields ``None``."""
    target_z = np.asarray(target_z, dtype=np.float64)
    if target_z.shape[0] == 0:
        raise UsageError("target batch is empty")
    means = [None if len(z) == 0 else np.asarray(z, dtype=np.float64).mean(axis=0)
             for z in source_z]
    return means, target_z.mean(axis=0)


def compute_lambda(source_means, target_mean, previous=None) -> np.ndarray:
    """Softmax of negated squared distances between source and target means.

    Sources with no mean (``None``) keep their entry from ``previous``; the
    remaining mass is split among the others by the softmax.
    """
    if len(source_means) == 0:
        raise UsageError("need at least one source domain")
    target_mean = np.asarray(target_mean, dtype=np.float64)
    present = np.array([m is not None for m in source_means])
    if not present.all() and previous is None:
        raise UsageError("missing source means require a previous weight vector")
    lam = np.zeros(len(source_means)) if previous is None else np.array(previous, float)
    if not present.any():
        return lam
    dist = np.array([np.sum((m - target_mean) ** 2) for m in source_means if m is not None])
    mass = 1.0 - lam[~present].sum()
    lam[present] = mass * softmax(-dist)
    return lam


def smooth_lambda(state: DomainWeightState, new_lambda) -> DomainWeightState:
    new_lambda = np.asarray(new_lambda, dtype=np.float64)
    if new_lambda.shape != state.lam.shape:
        raise UsageError("lambda length changed between updates")
    return DomainWeightState(state.rho * state.lam + (1.0 - state.rho) * new_lambda, state.rho)
