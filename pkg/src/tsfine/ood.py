"""Feature-space out-of-distribution test.

Simulate ``K`` trajectories at the current estimate, whiten the feature
cloud, and compare the observed whitened squared distance with the empirical
``1 - alpha`` quantile of the in-sample distances.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch
from .numerics import empirical_quantile, sym_inv_sqrt
from .twin import DigitalTwin

__all__ = [
    "FeatureBank", "FeatureStats", "OodDecision",
    "build_bank", "feature_stats", "whitened_stat", "whitened_dists", "ood_test",
    "AVERAGING_SEEDS",
]

AVERAGING_SEEDS = (8000, 8001, 8002)


@dataclass(frozen=True, eq=False)
class FeatureBank:
    matrix: np.ndarray
    theta: np.ndarray
    seeds: tuple = ()

    def __post_init__(self):
        h = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if h.shape[0] < 2:
            raise ValueError("a feature bank needs at least two rows")
        if not np.all(np.isfinite(h)):
            raise ValueError("feature bank rows must be finite")
        object.__setattr__(self, "matrix", h)

    @property
    def k(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True, eq=False)
class FeatureStats:
    mu: np.ndarray
    s: np.ndarray
    whitener: np.ndarray
    epsilon: float

    def whiten(self, x):
        """``S^{-1/2} (x - mu)`` for a vector or a stack of rows."""
        return (np.asarray(x, dtype=float) - self.mu) @ self.whitener


@dataclass(frozen=True, eq=False)
class OodDecision:
    s_obs: float
    threshold: float
    alpha: float
    is_ood: bool
    bootstrap: np.ndarray = field(repr=False)
    epsilon: float = 0.0

    def to_json(self) -> dict:
        return {
            "s_obs": self.s_obs,
            "threshold": self.threshold,
            "alpha": self.alpha,
            "is_ood": self.is_ood,
            "K": int(self.bootstrap.size),
            "epsilon": self.epsilon,
        }


def build_bank(theta, k: int, twin: DigitalTwin, base_seed: int) -> FeatureBank:
    """Row ``i`` holds the features of a simulation at ``theta`` with seed ``base_seed + i``."""
    if k < 2:
        raise ValueError("K must be >= 2")
    seeds = tuple(int(base_seed) + i for i in range(k))
    if set(seeds) & set(AVERAGING_SEEDS):
        raise ValueError("bank seeds overlap the averaging seed set")
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    h = twin.features(np.tile(theta, (k, 1)), seeds)
    return FeatureBank(h, theta, seeds)


def feature_stats(bank: FeatureBank, epsilon: float | None = None) -> FeatureStats:
    """Mean, ``K - 1`` covariance plus ``epsilon * I``, and the symmetric whitener.

    ``epsilon=None`` picks ``1e-6 * trace(S_raw) / n`` (with a tiny absolute
    floor for degenerate banks).
    """
    h = bank.matrix
    mu = h.mean(axis=0)
    dev = h - mu
    s_raw = dev.T @ dev / (h.shape[0] - 1)
    n = h.shape[1]
    if epsilon is None:
        epsilon = max(1e-6 * np.trace(s_raw) / n, 1e-12)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    s = s_raw + epsilon * np.eye(n)
    return FeatureStats(mu, s, sym_inv_sqrt(s), float(epsilon))


def whitened_stat(x, stats: FeatureStats) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != stats.mu.shape:
        raise ShapeMismatch(f"feature vector {x.shape} vs stats {stats.mu.shape}")
    w = stats.whiten(x)
    return float(w @ w)


def whitened_dists(bank: FeatureBank, stats: FeatureStats) -> np.ndarray:
    """Whitened squared distances of every bank row."""
    w = stats.whiten(bank.matrix)
    return np.einsum("ij,ij->i", w, w)


def ood_test(x_obs, bank: FeatureBank, epsilon: float | None = None, alpha: float = 0.10,
             stats: FeatureStats | None = None) -> OodDecision:
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if stats is None:
        stats = feature_stats(bank, epsilon)
    s_obs = whitened_stat(x_obs, stats)
    s_k = whitened_dists(bank, stats)
    q = empirical_quantile(s_k, 1.0 - alpha)
    return OodDecision(s_obs, q, alpha, bool(s_obs > q), s_k, stats.epsilon)
