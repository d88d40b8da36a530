"""A simulator, its fixed input sequence and a feature map bundled together."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import FeatureSpec, compress_batch
from .simulators import SimulatorSpec, Trajectory, simulate, simulate_batch


@dataclass(frozen=True, eq=False)
class DigitalTwin:
    sim: SimulatorSpec
    fspec: FeatureSpec
    inputs: np.ndarray | None = None

    def __post_init__(self):
        u = np.zeros(self.sim.horizon) if self.inputs is None else np.asarray(self.inputs, float)
        object.__setattr__(self, "inputs", u)

    @property
    def n_params(self) -> int:
        return self.sim.n_params

    @property
    def n_features(self) -> int:
        return self.fspec.dim(self.sim.horizon)

    def simulate(self, theta, seed, noise=True) -> Trajectory:
        return simulate(theta, self.sim, seed, self.inputs, noise)

    def outputs(self, thetas, seeds, noise=True, on_nonfinite="raise") -> np.ndarray:
        return simulate_batch(thetas, self.sim, seeds, self.inputs, noise, on_nonfinite)

    def features(self, thetas, seeds, on_nonfinite="raise") -> np.ndarray:
        """Features of one simulation per ``(theta, seed)`` row.

        With ``on_nonfinite="nan"`` divergent rows come back as NaN.
        """
        y = self.outputs(thetas, seeds, on_nonfinite=on_nonfinite)
        ok = np.all(np.isfinite(y), axis=1)
        if ok.all():
            return compress_batch(y, self.inputs, self.fspec)
        out = np.full((y.shape[0], self.n_features), np.nan)
        if ok.any():
            out[ok] = compress_batch(y[ok], self.inputs, self.fspec)
        return out

    def compress(self, y) -> np.ndarray:
        return compress_batch(np.atleast_2d(y), self.inputs, self.fspec)
