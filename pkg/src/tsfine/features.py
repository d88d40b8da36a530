"""Stage-1 compression: AR / ARX coefficients fitted by least squares.

Fits have no intercept. Regression rows start at ``t = max(na, nb)`` (no
zero padding) and a ridge term is applied by augmenting the regressor matrix
with ``sqrt(ridge) * I`` rows, which keeps the solve orthogonal.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch, TooShort
from .numerics import solve_lls

__all__ = ["FeatureSpec", "fit_ar", "fit_arx", "compress", "compress_batch", "regressors"]


@dataclass(frozen=True)
class FeatureSpec:
    """Which coefficients to extract.

    ``kind`` is ``"ar"`` (uses ``na`` lags of y), ``"arx"`` (``na`` lags of y
    then ``nb`` lags of u) or ``"raw"`` (the output sequence itself; meant for
    synthetic test simulators).
    """

    kind: str = "ar"
    na: int = 5
    nb: int = 0
    ridge: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("ar", "arx", "raw"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.kind in ("ar", "arx") and self.na < 1:
            raise ValueError("AR order must be >= 1")
        if self.kind == "arx" and self.nb < 1:
            raise ValueError("ARX input order must be >= 1")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")

    def dim(self, horizon: int | None = None) -> int:
        if self.kind == "ar":
            return self.na
        if self.kind == "arx":
            return self.na + self.nb
        if horizon is None:
            raise ValueError("raw features need the horizon to know their size")
        return horizon


def regressors(y, u, na, nb):
    """Stacked regressor matrices and targets for a batch of output rows.

    ``y`` has shape ``(B, N)``, ``u`` shape ``(N,)``. Returns ``phi`` of
    shape ``(B, N - start, na + nb)`` and ``target`` of shape ``(B, N - start)``.
    """
    y = np.atleast_2d(y)
    n = y.shape[1]
    start = max(na, nb)
    rows = n - start
    cols = [y[:, start - i: n - i] for i in range(1, na + 1)]
    if nb:
        ub = np.broadcast_to(u, y.shape)
        cols += [ub[:, start - j: n - j] for j in range(1, nb + 1)]
    phi = np.stack(cols, axis=-1)
    assert phi.shape[1] == rows
    return phi, y[:, start:]


def _fit(y, u, na, nb, ridge):
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n = y.shape[1]
    if n <= 2 * max(na, nb):
        raise TooShort(f"need more than {2 * max(na, nb)} samples, got {n}")
    phi, target = regressors(y, u, na, nb)
    ncol = na + nb
    if ridge > 0:
        aug = np.broadcast_to(np.sqrt(ridge) * np.eye(ncol), (y.shape[0], ncol, ncol))
        phi = np.concatenate([phi, aug], axis=1)
        target = np.concatenate([target, np.zeros((y.shape[0], ncol))], axis=1)
    return solve_lls(phi, target)


def fit_ar(y, p: int, ridge: float = 0.0) -> np.ndarray:
    """Coefficients ``a_1..a_p`` of ``y_t ~ sum_i a_i y_{t-i}``."""
    y = np.asarray(y, dtype=float)
    coef = _fit(y, None, p, 0, ridge)
    return coef[0] if y.ndim == 1 else coef


def fit_arx(y, u, na: int, nb: int, ridge: float = 0.0) -> np.ndarray:
    """Coefficients ``(a_1..a_na, b_1..b_nb)`` of ``y_t ~ sum a_i y_{t-i} + sum b_j u_{t-j}``."""
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != y.shape[-1]:
        raise ShapeMismatch("input and output lengths differ")
    coef = _fit(y, u, na, nb, ridge)
    return coef[0] if y.ndim == 1 else coef


def compress_batch(outputs, inputs, spec: FeatureSpec, chunk_elems: int = 20_000_000) -> np.ndarray:
    """Features for every row of ``outputs`` (shape ``(B, N)``) sharing ``inputs``."""
    outputs = np.atleast_2d(np.asarray(outputs, dtype=float))
    if spec.kind == "raw":
        return outputs.copy()
    b, n = outputs.shape
    nb = spec.nb if spec.kind == "arx" else 0
    u = np.zeros(n) if inputs is None else np.asarray(inputs, dtype=float)
    per_row = n * (spec.na + nb) * 2
    step = max(1, chunk_elems // max(per_row, 1))
    parts = [_fit(outputs[i:i + step], u, spec.na, nb, spec.ridge) for i in range(0, b, step)]
    return np.concatenate(parts, axis=0)


def compress(z, spec: FeatureSpec) -> np.ndarray:
    """Feature vector of a single :class:`~tsfine.simulators.Trajectory`."""
    return compress_batch(z.outputs[None, :], z.inputs, spec)[0]
