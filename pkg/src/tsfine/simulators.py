"""Discrete-time digital twins integrated with forward Euler.

Two built-in systems are provided, the Van der Pol oscillator and a pair of
cascaded water tanks, plus a registry for user supplied models. Every
simulation is a pure function of ``(theta, spec, inputs, seed)``.

Noise comes from a counter-based Philox stream keyed by the seed alone. The
full ``(horizon, n_states + 1)`` block of standard normals is drawn in one go
(process channels first, measurement channel last), so two simulations with
the same seed consume identical noise regardless of the parameter value.
That is what makes finite differences with common random numbers work.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NonFinite, ShapeMismatch

__all__ = [
    "ParamVector",
    "Trajectory",
    "SimulatorSpec",
    "StateSpaceModel",
    "VanDerPol",
    "CascadedTanks",
    "register_model",
    "get_model",
    "noise_block",
    "gen_prbs",
    "simulate",
    "simulate_batch",
    "simulate_vdp",
    "simulate_tanks",
    "vdp_spec",
    "tanks_spec",
]


@dataclass(frozen=True)
class ParamVector:
    values: tuple
    bounds: tuple | None = None

    def __post_init__(self):
        vals = tuple(float(v) for v in np.atleast_1d(self.values))
        object.__setattr__(self, "values", vals)
        if not vals:
            raise ValueError("ParamVector needs at least one coordinate")
        if not np.all(np.isfinite(vals)):
            raise ValueError("ParamVector values must be finite")
        if self.bounds is not None:
            if len(self.bounds) != len(vals):
                raise ShapeMismatch("bounds length differs from value length")
            for v, (lo, hi) in zip(vals, self.bounds):
                if not lo <= v <= hi:
                    raise ValueError(f"value {v} outside bounds [{lo}, {hi}]")

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class Trajectory:
    inputs: np.ndarray
    outputs: np.ndarray
    dt: float
    seed: int | None = None

    def __post_init__(self):
        u = np.asarray(self.inputs, dtype=float)
        y = np.asarray(self.outputs, dtype=float)
        if u.shape != y.shape or u.ndim != 1:
            raise ShapeMismatch(f"inputs {u.shape} and outputs {y.shape} must be equal 1-d")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(y))):
            raise ValueError("trajectory entries must be finite")
        object.__setattr__(self, "inputs", u)
        object.__setattr__(self, "outputs", y)

    def __len__(self):
        return self.outputs.size


@dataclass(frozen=True)
class SimulatorSpec:
    """Settings of one digital twin.

    ``process_var`` holds one variance per state. With the default
    ``noise_scaling="dt"`` a draw ``w ~ N(0, var)`` is added to the state
    derivative before the Euler step, ``x += dt * (f(x) + w)``. With
    ``"sqrt_dt"`` the increment is ``sqrt(dt) * w`` instead (Euler-Maruyama
    for a diffusion of intensity ``var``). ``bounds`` are the physical
    parameter limits used for clipping.
    """

    kind: str
    dt: float
    horizon: int
    process_var: tuple
    measurement_var: float
    x0: tuple
    bounds: tuple
    plugin: str | None = None
    noise_scaling: str = "dt"

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if any(v < 0 for v in self.process_var) or self.measurement_var < 0:
            raise ValueError("noise variances must be nonnegative")
        if self.kind not in ("vdp", "tanks", "plugin"):
            raise ValueError(f"unknown simulator kind {self.kind!r}")
        if self.noise_scaling not in ("dt", "sqrt_dt"):
            raise ValueError(f"unknown noise scaling {self.noise_scaling!r}")
        if self.kind == "plugin" and not self.plugin:
            raise ValueError("plugin simulators need a registered plugin name")
        object.__setattr__(self, "process_var", tuple(float(v) for v in self.process_var))
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
        object.__setattr__(self, "bounds", tuple((float(lo), float(hi)) for lo, hi in self.bounds))

    @property
    def n_params(self) -> int:
        return len(self.bounds)

    @property
    def process_sd(self) -> np.ndarray:
        """Standard deviation of the per-step process increment, one per state."""
        gain = self.dt if self.noise_scaling == "dt" else np.sqrt(self.dt)
        return gain * np.sqrt(np.asarray(self.process_var))

    def noiseless(self) -> "SimulatorSpec":
        return replace(self, process_var=(0.0,) * len(self.process_var), measurement_var=0.0)

    def clip(self, theta):
        theta = np.asarray(theta, dtype=float)
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        return np.clip(theta, lo, hi)


def noise_block(seed: int, n_steps: int, n_channels: int) -> np.ndarray:
    """Standard normal draws of shape ``(n_steps, n_channels)`` for ``seed``."""
    gen = np.random.Generator(np.random.Philox(key=int(seed)))
    return gen.standard_normal((n_steps, n_channels))


class StateSpaceModel:
    """Continuous-time model ``dx/dt = drift(x, theta, u)``, ``y = output(x, theta, u)``.

    Arrays are batched: ``x`` is ``(B, n_states)``, ``theta`` is ``(B, d)`` and
    ``u`` is a scalar shared by the batch. Subclasses that are not naturally
    state-space may override :meth:`rollout` instead.
    """

    name = "model"
    n_states = 1
    n_params = 1

    def drift(self, x, theta, u):
        raise NotImplementedError

    def output(self, x, theta, u):
        return x[:, 0]

    def project(self, x):
        """Map a state back onto the physically admissible set (identity by default)."""
        return x

    def step(self, x, theta, u, dt):
        """Noise-free Euler transition."""
        return self.project(x + dt * self.drift(x, theta, u))

    def rollout(self, thetas, inputs, noise, spec: SimulatorSpec):
        thetas = np.asarray(thetas, dtype=float)
        batch = thetas.shape[0]
        n = inputs.size
        x = np.tile(np.asarray(spec.x0, dtype=float), (batch, 1))
        proc_sd = spec.process_sd
        meas_sd = np.sqrt(spec.measurement_var)
        y = np.empty((batch, n))
        ns = self.n_states
        for k in range(n):
            u = inputs[k]
            y[:, k] = self.output(x, thetas, u) + meas_sd * noise[:, k, ns]
            x = self.project(x + spec.dt * self.drift(x, thetas, u) + proc_sd * noise[:, k, :ns])
        return y


class VanDerPol(StateSpaceModel):
    name = "vdp"
    n_states = 2
    n_params = 1

    def drift(self, x, theta, u):
        nu = theta[:, 0]
        x1, x2 = x[:, 0], x[:, 1]
        return np.stack([x2, nu * (1.0 - x1 * x1) * x2 - x1], axis=1)


class CascadedTanks(StateSpaceModel):
    """Two tanks in series; only the lower level is measured.

    With ``dt = 0.5`` an Euler step can overshoot a small equilibrium level
    into negative values, where ``-k sqrt(|h|)`` keeps draining and the
    rollout runs away. Levels are therefore projected onto ``h >= 0`` after
    every step unless ``nonneg_levels`` is switched off.
    """

    name = "tanks"
    n_states = 2
    n_params = 4

    def __init__(self, nonneg_levels: bool = True):
        self.nonneg_levels = nonneg_levels

    def project(self, x):
        return np.maximum(x, 0.0) if self.nonneg_levels else x

    def drift(self, x, theta, u):
        k1, k2, k3, k4 = theta.T
        r1 = np.sqrt(np.abs(x[:, 0]))
        r2 = np.sqrt(np.abs(x[:, 1]))
        return np.stack([-k1 * r1 + k4 * u, k2 * r1 - k3 * r2], axis=1)

    def output(self, x, theta, u):
        return x[:, 1]


class IdentityModel(StateSpaceModel):
    """Passes the input straight to the output (y_k = u_k)."""

    name = "identity"
    n_states = 1
    n_params = 1

    def drift(self, x, theta, u):
        return np.zeros_like(x)

    def output(self, x, theta, u):
        return np.full(x.shape[0], float(u))


class LinearGain(StateSpaceModel):
    """Static gain ``y_k = theta * u_k`` with a dummy state."""

    name = "linear_gain"
    n_states = 1
    n_params = 1

    def drift(self, x, theta, u):
        return np.zeros_like(x)

    def output(self, x, theta, u):
        return theta[:, 0] * u


@dataclass
class LinearMapModel(StateSpaceModel):
    """Output sequence equal to ``A @ theta`` (plus measurement noise).

    Paired with the ``raw`` feature kind this gives a feature map that is
    exactly linear in the parameters, which is handy for checking the
    refinement code against closed forms.
    """

    matrix: np.ndarray = field(default_factory=lambda: np.eye(1))
    name = "linear_map"

    def __post_init__(self):
        self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        self.n_params = self.matrix.shape[1]

    def rollout(self, thetas, inputs, noise, spec):
        a = self.matrix
        if inputs.size != a.shape[0]:
            raise ShapeMismatch("linear map rows must equal the horizon")
        y = np.asarray(thetas, dtype=float) @ a.T
        return y + np.sqrt(spec.measurement_var) * noise[:, :, self.n_states]


_REGISTRY: dict[str, StateSpaceModel] = {
    "vdp": VanDerPol(),
    "tanks": CascadedTanks(),
    "identity": IdentityModel(),
    "linear_gain": LinearGain(),
}


def register_model(name: str, model: StateSpaceModel) -> None:
    """Make ``model`` available as ``SimulatorSpec(kind="plugin", plugin=name)``."""
    _REGISTRY[name] = model


def get_model(spec: SimulatorSpec) -> StateSpaceModel:
    key = spec.plugin if spec.kind == "plugin" else spec.kind
    try:
        return _REGISTRY[key]
    except KeyError:
        raise KeyError(f"no simulator registered under {key!r}") from None


def vdp_spec(horizon=300, dt=0.05, process_var=0.02, x0=(1.0, 0.0), nu_max=np.inf) -> SimulatorSpec:
    return SimulatorSpec("vdp", dt, horizon, (0.0, process_var), 0.0, x0, ((0.0, nu_max),))


def tanks_spec(horizon=400, dt=0.5, process_var=0.01, measurement_var=0.02, x0=(0.0, 0.0)) -> SimulatorSpec:
    return SimulatorSpec(
        "tanks", dt, horizon, (process_var, process_var), measurement_var, x0,
        ((1e-6, np.inf),) * 4,
    )


def gen_prbs(level_range, hold: int, n: int, seed: int) -> np.ndarray:
    """Piecewise-constant excitation; each ``hold``-sample block gets a uniform level."""
    if hold < 1:
        raise ValueError("hold must be >= 1")
    lo, hi = level_range
    rng = np.random.default_rng(seed)
    n_blocks = -(-n // hold)
    levels = rng.uniform(lo, hi, size=n_blocks)
    return np.repeat(levels, hold)[:n]


def _first_nonfinite(y):
    bad = ~np.isfinite(y)
    cols = np.nonzero(bad.any(axis=0))[0]
    return int(cols[0]) if cols.size else None


def simulate_batch(thetas, spec: SimulatorSpec, seeds, inputs=None, noise=True, on_nonfinite="raise"):
    """Simulate ``B`` parameter rows, each with its own seed.

    Returns the ``(B, horizon)`` output matrix. ``noise=False`` gives the
    deterministic skeleton. With ``on_nonfinite="nan"`` divergent rows are
    returned as NaN instead of raising.
    """
    model = get_model(spec)
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if thetas.shape[1] != spec.n_params:
        raise ShapeMismatch(f"expected {spec.n_params} parameters, got {thetas.shape[1]}")
    seeds = list(np.broadcast_to(np.asarray(seeds, dtype=object), (thetas.shape[0],)))
    n = spec.horizon
    u = np.zeros(n) if inputs is None else np.asarray(inputs, dtype=float)
    if u.size != n:
        raise ShapeMismatch(f"input length {u.size} differs from horizon {n}")
    n_ch = model.n_states + 1
    if noise:
        eps = np.stack([noise_block(s, n, n_ch) for s in seeds])
    else:
        eps = np.zeros((thetas.shape[0], n, n_ch))
    with np.errstate(over="ignore", invalid="ignore"):
        y = model.rollout(thetas, u, eps, spec)
    if on_nonfinite == "raise":
        step = _first_nonfinite(y)
        if step is not None:
            raise NonFinite(f"simulation diverged at step {step}", step)
    else:
        y[~np.all(np.isfinite(y), axis=1)] = np.nan
    return y


def simulate(theta, spec: SimulatorSpec, seed: int, inputs=None, noise=True) -> Trajectory:
    n = spec.horizon
    u = np.zeros(n) if inputs is None else np.asarray(inputs, dtype=float)
    y = simulate_batch(np.atleast_1d(np.asarray(theta, dtype=float))[None, :], spec, [seed], u, noise)[0]
    return Trajectory(u, y, spec.dt, seed)


def simulate_vdp(nu: float, inputs, spec: SimulatorSpec, seed: int) -> Trajectory:
    """Van der Pol rollout; the input channel is carried along but unused."""
    if spec.kind != "vdp":
        raise ValueError("spec is not a Van der Pol spec")
    return simulate([nu], spec, seed, inputs)


def simulate_tanks(theta, inputs, spec: SimulatorSpec, seed: int) -> Trajectory:
    if spec.kind != "tanks":
        raise ValueError("spec is not a tanks spec")
    if np.any(np.asarray(inputs) < 0):
        raise ValueError("tank inflow must be nonnegative")
    return simulate(theta, spec, seed, inputs)
