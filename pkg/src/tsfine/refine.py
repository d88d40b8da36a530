"""Gauss-Newton refinement in whitened feature space and fine-tune data synthesis.

The pieces, in pipeline order:

* ``seed_avg_features`` / ``whitened_residual``: the misfit between the
  seed-averaged simulated features and the observation.
* ``fd_jacobian``: central differences with common random numbers.
* ``gauss_newton``: regularized GN with backtracking, pulled toward the
  starting estimate.
* ``fisher_matrix``, ``sample_ellipsoid``, ``sensitivity_scales``,
  ``sample_hybrid``: the parameter cloud around the refined point.
* ``build_finetune_set``: one fresh simulation per cloud sample.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .numerics import chi2_quantile, cholesky, solve_lls
from .ood import AVERAGING_SEEDS, FeatureStats, build_bank, feature_stats
from .regressor import LabeledSet
from .seeding import derive_seed
from .twin import DigitalTwin

log = logging.getLogger(__name__)

__all__ = [
    "GnConfig", "GnResult", "Ellipsoid", "SampleCloud",
    "seed_avg_features", "whitened_residual", "fd_jacobian", "gauss_newton",
    "fisher_matrix", "make_ellipsoid", "sample_ellipsoid", "sensitivity_scales",
    "sample_hybrid", "build_finetune_set",
]


@dataclass(frozen=True)
class GnConfig:
    gamma: float = 1e-3
    max_iters: int = 8
    shrink: float = 0.5
    sufficient_decrease: float = 1e-4
    max_halvings: int = 10
    fd_step: float = 1e-3
    fim_ridge: float | None = None
    seeds: tuple = AVERAGING_SEEDS
    step_tol: float = 1e-6
    converge_tol: float = 1e-4
    bank_size: int = 150
    epsilon: float | None = None
    restat_each_iter: bool = False
    step_control: str = "damping"
    damping_growth: float = 10.0

    def __post_init__(self):
        if self.gamma <= 0 or self.fd_step <= 0:
            raise ValueError("gamma and fd_step must be positive")
        if self.step_control not in ("damping", "halving"):
            raise ValueError(f"unknown step control {self.step_control!r}")
        if self.damping_growth <= 1:
            raise ValueError("damping_growth must exceed 1")
        if self.fim_ridge is not None and self.fim_ridge <= 0:
            raise ValueError("fim_ridge must be positive")
        if not self.seeds:
            raise ValueError("need at least one averaging seed")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


@dataclass(eq=False)
class GnResult:
    theta_gn: np.ndarray
    trace: list
    delta_misfit: float
    jacobian: np.ndarray
    stats: FeatureStats
    accepted: int = 0
    line_search_failed: bool = False
    iterates: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "theta_gn": self.theta_gn.tolist(),
            "objective_trace": [float(v) for v in self.trace],
            "accepted_steps": self.accepted,
            "line_search_failed": self.line_search_failed,
            "delta_misfit": self.delta_misfit,
            "sensitivities": np.linalg.norm(self.jacobian, axis=0).tolist(),
        }


@dataclass(eq=False)
class Ellipsoid:
    center: np.ndarray
    fim: np.ndarray
    factor: np.ndarray
    coverage: float = 0.95

    def quad_form(self, theta) -> np.ndarray:
        dev = np.atleast_2d(theta) - self.center
        return np.einsum("ij,jk,ik->i", dev, self.fim, dev)

    def contains(self, theta) -> np.ndarray:
        return self.quad_form(theta) <= chi2_quantile(self.center.size, self.coverage)


@dataclass(eq=False)
class SampleCloud:
    samples: np.ndarray
    provenance: np.ndarray
    unclipped: np.ndarray | None = None

    def __len__(self):
        return self.samples.shape[0]

    def to_json(self) -> dict:
        return {
            "count": len(self),
            "n_ellipsoid": int(np.sum(self.provenance == "ellipsoid")),
            "n_sensitivity": int(np.sum(self.provenance == "sensitivity")),
            "mean": self.samples.mean(axis=0).tolist() if len(self) else [],
            "std": self.samples.std(axis=0).tolist() if len(self) else [],
            "samples": self.samples.tolist(),
            "provenance": self.provenance.tolist(),
        }


def seed_avg_features(theta, twin: DigitalTwin, seeds=AVERAGING_SEEDS) -> np.ndarray:
    if len(seeds) == 0:
        raise ValueError("need at least one seed")
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    h = twin.features(np.tile(theta, (len(seeds), 1)), list(seeds))
    return h.mean(axis=0)


def whitened_residual(theta, x_obs, stats: FeatureStats, twin: DigitalTwin, seeds=AVERAGING_SEEDS):
    fbar = seed_avg_features(theta, twin, seeds)
    return (fbar - np.asarray(x_obs, dtype=float)) @ stats.whitener


def _fd_steps(theta, rel):
    return rel * np.maximum(np.abs(theta), 1.0)


def fd_jacobian(theta, twin: DigitalTwin, stats: FeatureStats, cfg: GnConfig) -> np.ndarray:
    """Whitened Jacobian ``S^{-1/2} d fbar / d theta`` of shape ``(n, d)``.

    Central differences with the averaging seeds reused at every perturbed
    point. A coordinate sitting on a physical bound falls back to a
    one-sided difference into the feasible side.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    d = theta.size
    seeds = list(cfg.seeds)
    h = _fd_steps(theta, cfg.fd_step)
    lo = np.array([b[0] for b in twin.sim.bounds])
    hi = np.array([b[1] for b in twin.sim.bounds])
    plus = np.minimum(theta + h, hi)
    minus = np.maximum(theta - h, lo)
    rows = []
    for j in range(d):
        for v in (plus[j], minus[j]):
            t = theta.copy()
            t[j] = v
            rows.extend([t] * len(seeds))
    feats = twin.features(np.array(rows), seeds * (2 * d))
    feats = feats.reshape(d, 2, len(seeds), -1).mean(axis=2)
    jac = (feats[:, 0] - feats[:, 1]) / (plus - minus)[:, None]
    return (jac @ stats.whitener).T


def _objective(theta, x_obs, stats, twin, cfg, theta_init):
    r = whitened_residual(theta, x_obs, stats, twin, cfg.seeds)
    dev = theta - theta_init
    return 0.5 * float(r @ r) + 0.5 * cfg.gamma * float(dev @ dev), r


def _damped_step(jac, r, dev, gamma, mu):
    """Solve ``(J^T J + mu I) step = -(J^T r + gamma dev)`` for ``mu >= gamma``.

    Written as an augmented least-squares problem so ``J^T J`` is never formed.
    """
    d = jac.shape[1]
    a = np.vstack([jac, np.sqrt(gamma) * np.eye(d), np.sqrt(mu - gamma) * np.eye(d)])
    b = -np.concatenate([r, np.sqrt(gamma) * dev, np.zeros(d)])
    return solve_lls(a, b)


def gauss_newton(theta_init, x_obs, twin: DigitalTwin, cfg: GnConfig,
                 stats: FeatureStats | None = None, bank_seed: int = 0) -> GnResult:
    """Minimize ``0.5 |r(theta)|^2 + 0.5 gamma |theta - theta_init|^2``.

    ``stats`` defines the whitening metric; when omitted a bank is simulated
    at ``theta_init``. By default the metric stays fixed during the
    iterations so the objective trace is comparable (and nonincreasing);
    ``cfg.restat_each_iter`` re-estimates it at every iterate instead. After
    the loop the bank, whitener and Jacobian are recomputed at the final
    point, which is what the returned ``stats``/``jacobian`` hold.

    A rejected step is handled in one of two ways. With
    ``step_control="halving"`` the step length is halved. The default
    ``"damping"`` instead raises the Marquardt damping ``mu`` by
    ``damping_growth`` and re-solves, which turns the step away from
    directions the data barely constrain (a near-null singular direction of
    ``J`` produces a huge undamped step that halving alone cannot rescue).
    The damping relaxes again after every accepted step and never drops
    below ``gamma``, so an exactly linear problem still converges in one step.
    """
    theta_init = twin.sim.clip(np.atleast_1d(np.asarray(theta_init, dtype=float)))
    x_obs = np.asarray(x_obs, dtype=float)

    def bank_stats(theta, tag):
        bank = build_bank(theta, cfg.bank_size, twin, derive_seed(bank_seed, "gn", tag))
        return feature_stats(bank, cfg.epsilon)

    if stats is None:
        stats = bank_stats(theta_init, "init")
    theta = theta_init.copy()
    v, r = _objective(theta, x_obs, stats, twin, cfg, theta_init)
    trace = [v]
    iterates = [theta.copy()]
    accepted = 0
    failed = False
    mu = cfg.gamma
    for it in range(cfg.max_iters):
        if cfg.restat_each_iter and it > 0:
            stats = bank_stats(theta, it)
            v, r = _objective(theta, x_obs, stats, twin, cfg, theta_init)
        jac = fd_jacobian(theta, twin, stats, cfg)
        grad = jac.T @ r + cfg.gamma * (theta - theta_init)
        step = _damped_step(jac, r, theta - theta_init, cfg.gamma, cfg.gamma)
        if (-float(grad @ step) <= 1e-10 * max(v, 1e-300)
                or np.linalg.norm(step) <= cfg.converge_tol * (1.0 + np.linalg.norm(theta))):
            break  # converged: the remaining step is below the simulation noise floor
        t = 1.0
        mu = max(cfg.gamma, mu / cfg.damping_growth)
        if cfg.step_control == "damping" and mu > cfg.gamma:
            step = _damped_step(jac, r, theta - theta_init, cfg.gamma, mu)
        for _ in range(cfg.max_halvings + 1):
            cand = twin.sim.clip(theta + t * step)
            v_new, r_new = _objective(cand, x_obs, stats, twin, cfg, theta_init)
            if v_new <= v + cfg.sufficient_decrease * float(grad @ (cand - theta)) and v_new <= v:
                break
            if cfg.step_control == "damping":
                mu *= cfg.damping_growth
                step = _damped_step(jac, r, theta - theta_init, cfg.gamma, mu)
            else:
                t *= cfg.shrink
        else:
            failed = True
            log.warning("GN line search failed at iteration %d; keeping best iterate", it)
            break
        moved = float(np.linalg.norm(cand - theta))
        theta, v, r = cand, v_new, r_new
        trace.append(v)
        iterates.append(theta.copy())
        accepted += 1
        if moved < cfg.step_tol:
            break
    stats_gn = bank_stats(theta, "final")
    jac_gn = fd_jacobian(theta, twin, stats_gn, cfg)
    misfit = float(np.linalg.norm(whitened_residual(theta, x_obs, stats_gn, twin, cfg.seeds)))
    return GnResult(theta, trace, misfit, jac_gn, stats_gn, accepted, failed, iterates)


def fisher_matrix(jac, ridge: float | None = None) -> np.ndarray:
    """``J^T J + ridge I``; the default ridge is ``1e-6 * trace(J^T J) / d``."""
    jac = np.atleast_2d(np.asarray(jac, dtype=float))
    jtj = jac.T @ jac
    d = jtj.shape[0]
    if ridge is None:
        ridge = max(1e-6 * np.trace(jtj) / d, 1e-12)
    if ridge <= 0:
        raise ValueError("FIM ridge must be positive")
    g = jtj + ridge * np.eye(d)
    return 0.5 * (g + g.T)


def make_ellipsoid(center, fim, coverage=0.95) -> Ellipsoid:
    fim = np.asarray(fim, dtype=float)
    cov = np.linalg.inv(cholesky(fim).lower)
    cov = cov.T @ cov
    return Ellipsoid(np.atleast_1d(np.asarray(center, dtype=float)), fim,
                     cholesky(0.5 * (cov + cov.T)).lower, coverage)


def _clip(samples, bounds):
    if bounds is None:
        return samples
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    return np.clip(samples, lo, hi)


def sample_ellipsoid(center, fim, count: int, seed, bounds=None) -> np.ndarray:
    """``center + B z`` with ``B B^T = G^{-1}`` and ``z ~ N(0, I)``, clipped to ``bounds``."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    if count == 0:
        return np.empty((0, center.size))
    ell = make_ellipsoid(center, fim)
    z = np.random.default_rng(seed).standard_normal((count, center.size))
    return _clip(center + z @ ell.factor.T, bounds)


def sensitivity_scales(jac, delta_misfit: float, bank_dists, theta=None,
                       floor_rel: float = 1e-4, cap=None) -> np.ndarray:
    """Axis step sizes ``r_j = median(d_k) / s'_j * delta_misfit``.

    ``s'_j`` is the norm of column ``j`` of the whitened Jacobian and
    ``bank_dists`` the whitened (unsquared) distances of the bank rows.
    Scales are floored at ``floor_rel * max(|theta_j|, 1)`` and, when ``cap``
    is given, capped per coordinate.
    """
    jac = np.atleast_2d(np.asarray(jac, dtype=float))
    sens = np.linalg.norm(jac, axis=0)
    d_med = float(np.median(np.asarray(bank_dists, dtype=float)))
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(sens > 0, d_med * delta_misfit / sens, np.inf)
    r = np.where(np.isnan(r), 0.0, r)
    ref = np.ones(sens.size) if theta is None else np.maximum(np.abs(np.asarray(theta, float)), 1.0)
    r = np.maximum(r, floor_rel * ref)
    if cap is not None:
        r = np.minimum(r, np.broadcast_to(np.asarray(cap, dtype=float), r.shape))
    elif np.any(~np.isfinite(r)):
        raise ValueError("zero sensitivity needs a cap on the scales")
    return r


def sample_hybrid(center, fim, scales, m_ft: int, seed, bounds=None) -> SampleCloud:
    """Alternate confidence-set draws (even index) and axis draws (odd index)."""
    if m_ft < 1:
        raise ValueError("m_ft must be >= 1")
    center = np.atleast_1d(np.asarray(center, dtype=float))
    scales = np.asarray(scales, dtype=float)
    d = center.size
    factor = make_ellipsoid(center, fim).factor
    rng = np.random.default_rng(seed)
    raw = np.empty((m_ft, d))
    prov = np.empty(m_ft, dtype=object)
    for k in range(m_ft):
        if k % 2 == 0:
            raw[k] = center + factor @ rng.standard_normal(d)
            prov[k] = "ellipsoid"
        else:
            i = int(rng.integers(d))
            step = np.zeros(d)
            step[i] = rng.normal(0.0, scales[i])
            raw[k] = center + step
            prov[k] = "sensitivity"
    return SampleCloud(_clip(raw, bounds), prov.astype(str), raw)


def build_finetune_set(cloud: SampleCloud, twin: DigitalTwin, seed) -> LabeledSet:
    """Simulate every cloud sample once and pair its features with the sample.

    Divergent simulations are dropped (and logged).
    """
    if len(cloud) == 0:
        raise ValueError("empty sample cloud")
    seeds = [derive_seed(seed, "finetune", k) for k in range(len(cloud))]
    feats = twin.features(cloud.samples, seeds, on_nonfinite="nan")
    ok = np.all(np.isfinite(feats), axis=1)
    if not ok.all():
        log.warning("dropped %d of %d fine-tune samples with divergent simulations",
                    int((~ok).sum()), ok.size)
    if not ok.any():
        raise ValueError("every fine-tune simulation diverged")
    return LabeledSet(feats[ok], cloud.samples[ok])
