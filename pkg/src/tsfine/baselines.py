"""Comparison estimators: output-error PEM and a dual extended Kalman filter."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from itertools import product

import numpy as np

from .simulators import SimulatorSpec, Trajectory, get_model, simulate_batch

log = logging.getLogger(__name__)

__all__ = [
    "PemConfig", "PemResult", "pem",
    "DualEkfConfig", "EkfResult", "dual_ekf",
    "good_init", "bad_init",
]


# ----------------------------------------------------------------------------
# initializations


def good_init(theta0, rng, rel_sd=0.1, bounds=None) -> np.ndarray:
    """Truth plus ``N(0, (rel_sd * |theta0|)^2)`` per coordinate."""
    theta0 = np.asarray(theta0, dtype=float)
    out = theta0 + rng.normal(size=theta0.shape) * rel_sd * np.abs(theta0)
    if bounds is not None:
        out = np.clip(out, [b[0] for b in bounds], [b[1] for b in bounds])
    return out


def bad_init(theta0, box, scale=3.0) -> np.ndarray:
    """Corner of the ``scale``-times enlarged pretraining box farthest from ``theta0``."""
    theta0 = np.asarray(theta0, dtype=float)
    lo = scale * np.array([b[0] for b in box])
    hi = scale * np.array([b[1] for b in box])
    corners = np.array(list(product(*zip(lo, hi))))
    return corners[np.argmax(np.sum((corners - theta0) ** 2, axis=1))]


# ----------------------------------------------------------------------------
# PEM (output error, Levenberg-Marquardt)


@dataclass(frozen=True)
class PemConfig:
    init: tuple
    max_iters: int = 50
    damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.1
    max_damping: float = 1e10
    fd_step: float = 1e-4
    tol: float = 1e-10

    def __post_init__(self):
        object.__setattr__(self, "init", tuple(float(v) for v in np.atleast_1d(self.init)))
        if self.damping <= 0:
            raise ValueError("damping must be positive")


@dataclass(eq=False)
class PemResult:
    theta: np.ndarray
    cost_trace: list
    iterations: int
    diverged: bool = False


def _sim_outputs(thetas, spec, inputs):
    return simulate_batch(thetas, spec, 0, inputs, noise=False, on_nonfinite="nan")


def pem(z: Trajectory, spec: SimulatorSpec, cfg: PemConfig) -> PemResult:
    """Minimize ``sum_k (y_k - yhat_k(theta))^2`` with ``yhat`` the noise-free simulation.

    Jacobians of the simulated output come from central differences. The
    returned parameter is the best accepted iterate.
    """
    y = z.outputs
    lo = np.array([b[0] for b in spec.bounds])
    hi = np.array([b[1] for b in spec.bounds])
    theta = np.clip(np.asarray(cfg.init, dtype=float), lo, hi)
    d = theta.size

    def cost_of(out):
        if not np.all(np.isfinite(out)):
            return np.inf
        e = y - out
        return float(e @ e)

    yhat = _sim_outputs(theta[None], spec, z.inputs)[0]
    cost = cost_of(yhat)
    if not np.isfinite(cost):
        return PemResult(theta, [cost], 0, True)
    trace = [cost]
    mu = cfg.damping
    diverged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        h = cfg.fd_step * np.maximum(np.abs(theta), 1.0)
        plus = np.minimum(theta + h, hi)
        minus = np.maximum(theta - h, lo)
        rows = []
        for j in range(d):
            tp, tm = theta.copy(), theta.copy()
            tp[j], tm[j] = plus[j], minus[j]
            rows += [tp, tm]
        outs = _sim_outputs(np.array(rows), spec, z.inputs)
        if not np.all(np.isfinite(outs)):
            diverged = True
            break
        jac = ((outs[0::2] - outs[1::2]) / (plus - minus)[:, None]).T
        e = y - yhat
        jtj = jac.T @ jac
        g = jac.T @ e
        improved = False
        while mu <= cfg.max_damping:
            a = jtj + mu * np.diag(np.maximum(np.diag(jtj), 1e-12))
            try:
                step = np.linalg.solve(a, g)
            except np.linalg.LinAlgError:
                mu *= cfg.damping_up
                continue
            cand = np.clip(theta + step, lo, hi)
            out = _sim_outputs(cand[None], spec, z.inputs)[0]
            c = cost_of(out)
            if c < cost:
                improved = True
                break
            mu *= cfg.damping_up
        if not improved:
            break
        rel = (cost - c) / max(cost, 1e-300)
        moved = np.linalg.norm(cand - theta)
        theta, yhat, cost = cand, out, c
        trace.append(cost)
        mu = max(mu * cfg.damping_down, 1e-12)
        if rel < cfg.tol or moved < 1e-12:
            break
    return PemResult(theta, trace, it, diverged)


# ----------------------------------------------------------------------------
# dual EKF


@dataclass(frozen=True)
class DualEkfConfig:
    """Filter tuning. ``None`` entries are filled from the simulator spec.

    ``q_x`` defaults to the per-step process covariance of the simulator and ``r`` to the measurement variance, floored at
    ``r_floor`` so the filter stays well posed for noise-free outputs.
    """

    init: tuple
    p0_theta: float | tuple = 0.1
    p0_x: float = 1e-4
    q_theta: float | tuple = 1e-4
    q_x: tuple | None = None
    r: float | None = None
    r_floor: float = 1e-4
    fd_step: float = 1e-6
    blowup: float = 1e12

    def __post_init__(self):
        object.__setattr__(self, "init", tuple(float(v) for v in np.atleast_1d(self.init)))
        if self.r is not None and self.r <= 0:
            raise ValueError("measurement variance must be positive")


@dataclass(eq=False)
class EkfResult:
    theta: np.ndarray
    p_theta: np.ndarray
    history: np.ndarray
    blowup: bool = False
    min_eig: float = 0.0
    asymmetry: float = 0.0
    psd_violations: int = 0


def _fd_jac(fun, base, h):
    """Central-difference Jacobian of a batched map around ``base``."""
    k = base.size
    pert = np.repeat(base[None], 2 * k, axis=0)
    idx = np.arange(k)
    pert[2 * idx, idx] += h
    pert[2 * idx + 1, idx] -= h
    vals = fun(pert)
    return ((vals[0::2] - vals[1::2]) / (2 * h)).T


def _psd_fix(p):
    p = 0.5 * (p + p.T)
    return p


def dual_ekf(z: Trajectory, spec: SimulatorSpec, cfg: DualEkfConfig) -> EkfResult:
    """Coupled state and parameter EKFs driven by the output innovation.

    The parameter filter uses the total derivative of the predicted output
    with respect to ``theta``, propagated through a state sensitivity matrix.
    Covariances are updated in Joseph form and symmetrized after every step.
    """
    model = get_model(spec)
    nx = model.n_states
    dt = spec.dt
    lo = np.array([b[0] for b in spec.bounds])
    hi = np.array([b[1] for b in spec.bounds])
    theta = np.clip(np.asarray(cfg.init, dtype=float), lo, hi)
    d = theta.size
    x = np.asarray(spec.x0, dtype=float).copy()
    px = cfg.p0_x * np.eye(nx)
    pt = np.diag(np.broadcast_to(np.asarray(cfg.p0_theta, float), (d,))).copy()
    qt = np.diag(np.broadcast_to(np.asarray(cfg.q_theta, float), (d,)))
    qx = np.diag(spec.process_sd ** 2 if cfg.q_x is None else np.asarray(cfg.q_x, float))
    r = max(spec.measurement_var, cfg.r_floor) if cfg.r is None else cfg.r
    sens = np.zeros((nx, d))
    history = np.empty((z.outputs.size, d))
    min_eig, asym, violations = np.inf, 0.0, 0
    last_good = theta.copy()
    blowup = False

    def trans(rows, u):
        return model.step(rows[:, :nx], rows[:, nx:], u, dt)

    def outp(rows, u):
        return model.output(rows[:, :nx], rows[:, nx:], u)[:, None]

    for k, (u, y) in enumerate(zip(z.inputs, z.outputs)):
        pt = pt + qt
        base = np.concatenate([x, theta])
        hj = _fd_jac(lambda rows: outp(rows, u), base, cfg.fd_step)
        c, dth = hj[:, :nx], hj[:, nx:]
        e = y - float(model.output(x[None], theta[None], u)[0])
        s = (c @ px @ c.T).item() + r
        kx = (px @ c.T) / s
        ix = np.eye(nx) - kx @ c
        x = x + kx[:, 0] * e
        px = _psd_fix(ix @ px @ ix.T + r * kx @ kx.T)
        htot = c @ sens + dth
        st = (htot @ pt @ htot.T).item() + s
        kt = (pt @ htot.T) / st
        it_ = np.eye(d) - kt @ htot
        theta = np.clip(theta + kt[:, 0] * e, lo, hi)
        pt = _psd_fix(it_ @ pt @ it_.T + s * kt @ kt.T)
        sens = ix @ sens - kx @ dth
        base = np.concatenate([x, theta])
        fj = _fd_jac(lambda rows: trans(rows, u), base, cfg.fd_step)
        a, ft = fj[:, :nx], fj[:, nx:]
        x = model.step(x[None], theta[None], u, dt)[0]
        px = _psd_fix(a @ px @ a.T + qx)
        sens = a @ sens + ft
        history[k] = theta
        bad = not (np.all(np.isfinite(px)) and np.all(np.isfinite(pt)) and np.all(np.isfinite(x))
                   and np.trace(px) < cfg.blowup and np.trace(pt) < cfg.blowup)
        if bad:
            blowup = True
            theta = last_good
            history[k:] = theta
            log.warning("dual EKF covariance blow-up at step %d", k)
            break
        for p in (px, pt):
            ev = np.linalg.eigvalsh(p)
            min_eig = min(min_eig, float(ev[0] / max(ev[-1], 1e-300)))
            asym = max(asym, float(np.abs(p - p.T).max()))
            if ev[0] < -1e-9 * max(ev[-1], 1e-300):
                violations += 1
        last_good = theta.copy()
    return EkfResult(theta, pt, history, blowup, min_eig, asym, violations)
