"""File formats: observation CSVs and the binary offline bank.

Observation CSV: a ``step,u,y`` header followed by one row per time step,
steps counting from 0.

Bank file (little endian)::

    magic   8 bytes  b"TSFBANK\\0"
    version u32
    N, m, d, n       u32 each   (horizon, rows, params, features)
    inputs           N x f64
    m records        seed u64, theta d x f64, y N x f64
    features         m x n f64
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ParseError, ShapeMismatch
from ..simulators import Trajectory

__all__ = ["read_trajectory_csv", "write_trajectory_csv", "OfflineBank", "write_bank", "read_bank"]


def write_trajectory_csv(path, z: Trajectory) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "u", "y"])
        for k, (u, y) in enumerate(zip(z.inputs, z.outputs)):
            w.writerow([k, repr(float(u)), repr(float(y))])
    return path


def read_trajectory_csv(path, dt: float, horizon: int | None = None) -> Trajectory:
    """Parse an observation file; errors carry the 1-based line number."""
    rows = []
    with Path(path).open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if lineno == 1:
                if [c.strip() for c in row] != ["step", "u", "y"]:
                    raise ParseError("expected header 'step,u,y'", lineno)
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", lineno)
            try:
                step, u, y = int(row[0]), float(row[1]), float(row[2])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if step != len(rows):
                raise ParseError(f"step {step} out of sequence (expected {len(rows)})", lineno)
            if not (np.isfinite(u) and np.isfinite(y)):
                raise ParseError("non-finite value", lineno)
            rows.append((u, y))
    if not rows:
        raise ParseError("no data rows", 1)
    arr = np.array(rows)
    if horizon is not None and arr.shape[0] != horizon:
        raise ShapeMismatch(f"observation has {arr.shape[0]} steps, the estimator expects {horizon}")
    return Trajectory(arr[:, 0], arr[:, 1], dt)


@dataclass(eq=False)
class OfflineBank:
    """The pretraining pairs: simulated outputs, parameters and features."""

    inputs: np.ndarray
    seeds: np.ndarray
    thetas: np.ndarray
    outputs: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        m = self.thetas.shape[0]
        if not (self.seeds.shape == (m,) and self.outputs.shape == (m, self.inputs.size)
                and self.features.shape[0] == m):
            raise ShapeMismatch("inconsistent offline bank arrays")


_BANK_MAGIC = b"TSFBANK\x00"
_BANK_VERSION = 1


def write_bank(path, bank: OfflineBank) -> Path:
    path = Path(path)
    n_steps = bank.inputs.size
    m, d = bank.thetas.shape
    n = bank.features.shape[1]
    rec = np.dtype([("seed", "<u8"), ("theta", "<f8", (d,)), ("y", "<f8", (n_steps,))])
    records = np.empty(m, dtype=rec)
    records["seed"] = bank.seeds
    records["theta"] = bank.thetas
    records["y"] = bank.outputs
    with path.open("wb") as fh:
        fh.write(_BANK_MAGIC)
        fh.write(struct.pack("<5I", _BANK_VERSION, n_steps, m, d, n))
        fh.write(np.ascontiguousarray(bank.inputs, "<f8").tobytes())
        fh.write(records.tobytes())
        fh.write(np.ascontiguousarray(bank.features, "<f8").tobytes())
    return path


def read_bank(path) -> OfflineBank:
    buf = Path(path).read_bytes()
    if buf[:8] != _BANK_MAGIC:
        raise ParseError(f"{path}: not a bank file")
    version, n_steps, m, d, n = struct.unpack_from("<5I", buf, 8)
    if version != _BANK_VERSION:
        raise ParseError(f"{path}: unsupported bank version {version}")
    off = 8 + 20
    rec = np.dtype([("seed", "<u8"), ("theta", "<f8", (d,)), ("y", "<f8", (n_steps,))])
    need = off + 8 * n_steps + rec.itemsize * m + 8 * m * n
    if len(buf) != need:
        raise ParseError(f"{path}: expected {need} bytes, found {len(buf)}")
    inputs = np.frombuffer(buf, "<f8", n_steps, off).astype(float)
    off += 8 * n_steps
    records = np.frombuffer(buf, rec, m, off)
    off += rec.itemsize * m
    feats = np.frombuffer(buf, "<f8", m * n, off).astype(float).reshape(m, n)
    return OfflineBank(inputs, records["seed"].astype(np.uint64), records["theta"].astype(float),
                       records["y"].astype(float), feats)
