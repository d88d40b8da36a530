"""Stage-2 regressor: a shared trunk followed by one head per parameter.

The network is written directly in numpy (forward pass, reverse-mode
gradients, Adam). Each hidden block is ``Linear -> [LayerNorm] -> activation
-> [Dropout]``; every head ends in a bias-free linear readout ``a_j``.

Inputs and targets are standardized with statistics estimated once on the
pretraining set and stored with the weights. The loss is evaluated in
standardized target units, so a weight ``w`` on head ``j`` corresponds to a
raw-unit weight ``w / y_std[j]**2``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DegenerateTarget, NonFiniteLoss, ParseError, ShapeMismatch

log = logging.getLogger(__name__)

__all__ = [
    "NetworkSpec",
    "NetworkParams",
    "TrainConfig",
    "LabeledSet",
    "init_params",
    "forward",
    "loss",
    "backward",
    "huber",
    "orth_penalty",
    "inverse_variance_weights",
    "fim_weights",
    "train",
    "finetune_heads",
    "save_checkpoint",
    "load_checkpoint",
    "file_sha256",
]

LN_EPS = 1e-5
LEAK = 0.01


def _relu(z):
    return np.maximum(z, 0.0)


def _leaky(z):
    return np.where(z > 0, z, LEAK * z)


ACTIVATIONS = {
    "relu": (_relu, lambda z, a: (z > 0).astype(z.dtype)),
    "leaky_relu": (_leaky, lambda z, a: np.where(z > 0, 1.0, LEAK)),
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "identity": (lambda z: z, lambda z, a: np.ones_like(z)),
}


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    trunk_widths: tuple = (256, 128)
    trunk_activation: str = "relu"
    trunk_dropout: float = 0.1
    trunk_layernorm: bool = False
    n_heads: int = 1
    head_depth: int = 2
    head_width: int = 128
    head_activation: str = "tanh"
    head_dropout: float = 0.1
    head_layernorm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "trunk_widths", tuple(int(w) for w in self.trunk_widths))
        if self.input_dim < 1 or self.n_heads < 1:
            raise ValueError("input_dim and n_heads must be >= 1")
        if any(w < 1 for w in self.trunk_widths) or self.head_width < 1 or self.head_depth < 0:
            raise ValueError("layer widths must be >= 1")
        for p in (self.trunk_dropout, self.head_dropout):
            if not 0.0 <= p < 1.0:
                raise ValueError("dropout must lie in [0, 1)")
        for a in (self.trunk_activation, self.head_activation):
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @property
    def trunk_out(self) -> int:
        return self.trunk_widths[-1] if self.trunk_widths else self.input_dim

    def with_head(self, depth=None, width=None, dropout=None) -> "NetworkSpec":
        return replace(
            self,
            head_depth=self.head_depth if depth is None else depth,
            head_width=self.head_width if width is None else width,
            head_dropout=self.head_dropout if dropout is None else dropout,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()


@dataclass
class NetworkParams:
    """Weights plus the frozen standardization statistics."""

    spec: NetworkSpec
    weights: dict
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            self.spec,
            {k: v.copy() for k, v in self.weights.items()},
            self.x_mean.copy(), self.x_std.copy(), self.y_mean.copy(), self.y_std.copy(),
        )

    def trunk_keys(self):
        return [k for k in self.weights if k.startswith("trunk.")]

    def head_keys(self):
        return [k for k in self.weights if k.startswith("head.")]

    def predict(self, x) -> np.ndarray:
        """Eval-mode prediction in raw parameter units; ``x`` is ``(n,)`` or ``(B, n)``."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        out = forward(np.atleast_2d(x), self, train=False)
        return out[0] if single else out


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    weights: tuple | None = None
    lambda_orth: float = 0.0
    huber_delta: float = 1.0
    seed: int = 0
    patience: int | None = None
    val_fraction: float = 0.1
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
            if any(w < 0 for w in self.weights):
                raise ValueError("target weights must be nonnegative")
        if self.lambda_orth < 0:
            raise ValueError("lambda_orth must be nonnegative")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")


@dataclass(frozen=True)
class LabeledSet:
    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.features, dtype=float))
        t = np.asarray(self.targets, dtype=float)
        if t.ndim == 1:
            t = t[:, None]
        if x.shape[0] != t.shape[0] or x.shape[0] < 1:
            raise ShapeMismatch("features and targets need the same nonzero row count")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "targets", t)

    def __len__(self):
        return self.features.shape[0]


# ----------------------------------------------------------------------------
# parameters


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_block(rng, w, prefix, fan_in, width, layernorm):
    w[f"{prefix}.W"] = _uniform(rng, (width, fan_in), fan_in)
    w[f"{prefix}.b"] = _uniform(rng, (width,), fan_in)
    if layernorm:
        w[f"{prefix}.g"] = np.ones(width)
        w[f"{prefix}.beta"] = np.zeros(width)


def _init_heads(rng, spec, w):
    for j in range(spec.n_heads):
        fan = spec.trunk_out
        for v in range(spec.head_depth):
            _init_block(rng, w, f"head.{j}.{v}", fan, spec.head_width, spec.head_layernorm)
            fan = spec.head_width
        w[f"head.{j}.a"] = _uniform(rng, (fan,), fan)


def init_params(spec: NetworkSpec, seed=0, x_mean=None, x_std=None, y_mean=None, y_std=None) -> NetworkParams:
    """Fan-in scaled uniform initialization, identity standardization by default."""
    rng = np.random.default_rng(seed)
    w = {}
    fan = spec.input_dim
    for r, width in enumerate(spec.trunk_widths):
        _init_block(rng, w, f"trunk.{r}", fan, width, spec.trunk_layernorm)
        fan = width
    _init_heads(rng, spec, w)
    n, d = spec.input_dim, spec.n_heads
    return NetworkParams(
        spec, w,
        np.zeros(n) if x_mean is None else np.asarray(x_mean, float),
        np.ones(n) if x_std is None else np.asarray(x_std, float),
        np.zeros(d) if y_mean is None else np.asarray(y_mean, float),
        np.ones(d) if y_std is None else np.asarray(y_std, float),
    )


# ----------------------------------------------------------------------------
# forward / backward


def _block_forward(x, w, prefix, act, dropout, layernorm, rng):
    z = x @ w[f"{prefix}.W"].T + w[f"{prefix}.b"]
    cache = {"x": x}
    if layernorm:
        mu = z.mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(z.var(axis=1, keepdims=True) + LN_EPS)
        xh = (z - mu) * inv
        cache["xh"], cache["inv"] = xh, inv
        s = xh * w[f"{prefix}.g"] + w[f"{prefix}.beta"]
    else:
        s = z
    f, _ = ACTIVATIONS[act]
    a = f(s)
    cache["s"], cache["a"] = s, a
    if rng is not None and dropout > 0:
        mask = (rng.random(a.shape) >= dropout) / (1.0 - dropout)
        cache["mask"] = mask
        a = a * mask
    return a, cache


def _block_backward(dout, cache, w, prefix, act, layernorm, grads):
    if "mask" in cache:
        dout = dout * cache["mask"]
    _, df = ACTIVATIONS[act]
    ds = dout * df(cache["s"], cache["a"])
    if layernorm:
        xh = cache["xh"]
        grads[f"{prefix}.g"] = (ds * xh).sum(axis=0)
        grads[f"{prefix}.beta"] = ds.sum(axis=0)
        dxh = ds * w[f"{prefix}.g"]
        dz = cache["inv"] * (dxh - dxh.mean(axis=1, keepdims=True)
                             - xh * (dxh * xh).mean(axis=1, keepdims=True))
    else:
        dz = ds
    grads[f"{prefix}.W"] = dz.T @ cache["x"]
    grads[f"{prefix}.b"] = dz.sum(axis=0)
    return dz @ w[f"{prefix}.W"]


def _trunk_forward(xs, params, rng):
    spec, w = params.spec, params.weights
    caches = []
    c = xs
    for r in range(len(spec.trunk_widths)):
        c, cache = _block_forward(c, w, f"trunk.{r}", spec.trunk_activation,
                                  spec.trunk_dropout, spec.trunk_layernorm, rng)
        caches.append(cache)
    return c, caches


def _heads_forward(t, params, rng):
    spec, w = params.spec, params.weights
    out = np.empty((t.shape[0], spec.n_heads))
    caches = []
    for j in range(spec.n_heads):
        h = t
        hc = []
        for v in range(spec.head_depth):
            h, cache = _block_forward(h, w, f"head.{j}.{v}", spec.head_activation,
                                      spec.head_dropout, spec.head_layernorm, rng)
            hc.append(cache)
        out[:, j] = h @ w[f"head.{j}.a"]
        caches.append((h, hc))
    return out, caches


def _standardize_x(x, params):
    return (x - params.x_mean) / params.x_std


def forward(x, params: NetworkParams, train=False, rng=None) -> np.ndarray:
    """Predictions in raw units for a ``(B, n)`` feature batch.

    ``train=True`` enables dropout and needs ``rng``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != params.spec.input_dim:
        raise ShapeMismatch(f"expected {params.spec.input_dim} features, got {x.shape[1]}")
    rng = rng if train else None
    if train and rng is None:
        raise ValueError("train mode needs an rng for dropout")
    t, _ = _trunk_forward(_standardize_x(x, params), params, rng)
    out, _ = _heads_forward(t, params, rng)
    return out * params.y_std + params.y_mean


def huber(r, delta):
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def _huber_grad(r, delta):
    return np.clip(r, -delta, delta)


def orth_penalty(params: NetworkParams) -> float:
    """Sum over head pairs of ``||U_j U_k^T||_F^2`` for the first head layers."""
    spec, w = params.spec, params.weights
    if spec.head_depth == 0:
        return 0.0
    total = 0.0
    for j in range(spec.n_heads):
        for k in range(j + 1, spec.n_heads):
            m = w[f"head.{j}.0.W"] @ w[f"head.{k}.0.W"].T
            total += float(np.sum(m * m))
    return total


def _orth_grad(params, lam, grads):
    spec, w = params.spec, params.weights
    if spec.head_depth == 0 or lam == 0 or spec.n_heads < 2:
        return
    u = [w[f"head.{j}.0.W"] for j in range(spec.n_heads)]
    for j in range(spec.n_heads):
        g = np.zeros_like(u[j])
        for k in range(spec.n_heads):
            if k != j:
                g += (u[j] @ u[k].T) @ u[k]
        grads[f"head.{j}.0.W"] = grads.get(f"head.{j}.0.W", 0.0) + 2.0 * lam * g


def _resolve_weights(cfg, d):
    if cfg.weights is None:
        return np.ones(d)
    if len(cfg.weights) != d:
        raise ShapeMismatch(f"{len(cfg.weights)} target weights for {d} heads")
    return np.asarray(cfg.weights)


def _loss_and_grad(xs, ts, params, cfg, rng=None, with_grad=True, trunk_out=None):
    """Loss on standardized arrays; returns ``(loss, grads)``.

    ``trunk_out`` short-circuits the trunk (its gradient is then skipped).
    """
    m = xs.shape[0] if trunk_out is None else trunk_out.shape[0]
    wts = _resolve_weights(cfg, params.spec.n_heads)
    if trunk_out is None:
        t, tcache = _trunk_forward(xs, params, rng)
    else:
        t, tcache = trunk_out, None
    pred, hcache = _heads_forward(t, params, rng)
    r = pred - ts
    data = float(np.sum(huber(r, cfg.huber_delta) * wts)) / m
    total = data + cfg.lambda_orth * orth_penalty(params)
    if not with_grad:
        return total, None
    grads = {}
    dpred = _huber_grad(r, cfg.huber_delta) * wts / m
    spec, w = params.spec, params.weights
    dt = np.zeros_like(t)
    for j in range(spec.n_heads):
        h, hc = hcache[j]
        grads[f"head.{j}.a"] = h.T @ dpred[:, j]
        dh = np.outer(dpred[:, j], w[f"head.{j}.a"])
        for v in reversed(range(spec.head_depth)):
            dh = _block_backward(dh, hc[v], w, f"head.{j}.{v}", spec.head_activation,
                                 spec.head_layernorm, grads)
        dt += dh
    if tcache is not None:
        dc = dt
        for r_ in reversed(range(len(spec.trunk_widths))):
            dc = _block_backward(dc, tcache[r_], w, f"trunk.{r_}", spec.trunk_activation,
                                 spec.trunk_layernorm, grads)
    _orth_grad(params, cfg.lambda_orth, grads)
    return total, grads


def _std_targets(t, params):
    return (np.asarray(t, dtype=float) - params.y_mean) / params.y_std


def loss(batch: LabeledSet, params: NetworkParams, cfg: TrainConfig) -> float:
    """Eval-mode (no dropout) value of the weighted Huber loss plus orthogonality term."""
    xs = _standardize_x(batch.features, params)
    return _loss_and_grad(xs, _std_targets(batch.targets, params), params, cfg, with_grad=False)[0]


def backward(batch: LabeledSet, params: NetworkParams, cfg: TrainConfig, rng=None) -> dict:
    """Exact gradient of :func:`loss` with respect to every weight array.

    With ``rng`` given, dropout masks are sampled from it (train mode).
    """
    xs = _standardize_x(batch.features, params)
    return _loss_and_grad(xs, _std_targets(batch.targets, params), params, cfg, rng=rng)[1]


def inverse_variance_weights(targets) -> np.ndarray:
    """``1 / Var`` per coordinate with the divisor-``m`` variance."""
    t = np.asarray(targets, dtype=float)
    if t.ndim == 1:
        t = t[:, None]
    if t.shape[0] < 2:
        raise DegenerateTarget("need at least two targets to estimate a variance")
    var = np.mean((t - t.mean(axis=0)) ** 2, axis=0)
    if np.any(var <= 0):
        raise DegenerateTarget(f"constant target coordinate(s) {np.nonzero(var <= 0)[0].tolist()}")
    return 1.0 / var


def fim_weights(fim_diag) -> np.ndarray:
    """Head weights proportional to the Fisher diagonal, normalized to mean one."""
    g = np.asarray(fim_diag, dtype=float)
    return g.size * g / g.sum()


# ----------------------------------------------------------------------------
# optimization


class _Adam:
    def __init__(self, keys, weights, lr, betas, eps):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(weights[k]) for k in keys}
        self.v = {k: np.zeros_like(weights[k]) for k in keys}
        self.t = 0

    def step(self, weights, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in self.m:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            weights[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _split(m, frac, rng):
    perm = rng.permutation(m)
    n_val = int(round(frac * m)) if m > 1 else 0
    n_val = min(n_val, m - 1)
    return perm[n_val:], perm[:n_val]


def _fit_loop(params, xs, ts, cfg, keys, rng, epochs, patience, trunk_cache=None):
    """Adam over shuffled mini-batches keeping the best-validation weights."""
    m = xs.shape[0]
    train_idx, val_idx = _split(m, cfg.val_fraction, rng)
    opt = _Adam(keys, params.weights, cfg.lr, cfg.betas, cfg.adam_eps)
    history = {"train_loss": [], "val_loss": []}
    best = (np.inf, {k: params.weights[k].copy() for k in keys}, 0)
    stall = 0
    batch_no = 0

    def val_loss():
        idx = val_idx if val_idx.size else train_idx
        tc = None if trunk_cache is None else trunk_cache[idx]
        return _loss_and_grad(xs[idx], ts[idx], params, cfg, with_grad=False, trunk_out=tc)[0]

    for epoch in range(epochs):
        order = train_idx[rng.permutation(train_idx.size)]
        running = 0.0
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            tc = None if trunk_cache is None else trunk_cache[idx]
            value, grads = _loss_and_grad(xs[idx], ts[idx], params, cfg, rng=rng, trunk_out=tc)
            if not np.isfinite(value):
                raise NonFiniteLoss(f"non-finite loss in batch {batch_no}", batch_no)
            opt.step(params.weights, grads)
            running += value * idx.size
            batch_no += 1
        history["train_loss"].append(running / order.size)
        vl = val_loss()
        history["val_loss"].append(vl)
        if vl < best[0]:
            best = (vl, {k: params.weights[k].copy() for k in keys}, epoch)
            stall = 0
        else:
            stall += 1
            if patience is not None and stall >= patience:
                break
    if epochs > 0:
        params.weights.update(best[1])
    history["best_epoch"] = best[2]
    history["best_val_loss"] = best[0] if epochs > 0 else None
    return history


def _stats(a):
    mean = a.mean(axis=0)
    std = a.std(axis=0)
    std[~(std > 1e-12)] = 1.0
    return mean, std


def train(data: LabeledSet, spec: NetworkSpec, cfg: TrainConfig):
    """Fit trunk and heads from scratch; returns ``(params, history)``.

    Standardization statistics are taken from ``data``. Without explicit
    ``cfg.weights`` each head gets the inverse target variance, converted to
    standardized units.
    """
    if data.features.shape[1] != spec.input_dim or data.targets.shape[1] != spec.n_heads:
        raise ShapeMismatch("labeled set does not match the network spec")
    if cfg.weights is None:
        w_raw = inverse_variance_weights(data.targets)
    x_mean, x_std = _stats(data.features)
    y_mean, y_std = _stats(data.targets)
    if cfg.weights is None:
        cfg = replace(cfg, weights=tuple(w_raw * y_std ** 2))
    rng = np.random.default_rng(cfg.seed)
    params = init_params(spec, int(rng.integers(2**63)), x_mean, x_std, y_mean, y_std)
    xs = _standardize_x(data.features, params)
    ts = _std_targets(data.targets, params)
    history = _fit_loop(params, xs, ts, cfg, list(params.weights), rng, cfg.epochs, cfg.patience)
    history["weights"] = list(cfg.weights)
    return params, history


def finetune_heads(data: LabeledSet, params: NetworkParams, cfg: TrainConfig, fim_diag=None,
                   new_head: dict | None = None):
    """Retrain only the heads with the trunk frozen; returns ``(params, history)``.

    The trunk is run once in eval mode and its outputs reused. ``fim_diag``
    sets the head weights (overriding ``cfg.weights``). ``new_head`` (keys
    ``depth``, ``width``, ``dropout``) replaces every head with a freshly
    initialized one of that shape.
    """
    out = params.copy()
    if new_head:
        spec = out.spec.with_head(**new_head)
        hw = {}
        _init_heads(np.random.default_rng([cfg.seed, 1]), spec, hw)
        out.weights = {k: v for k, v in out.weights.items() if k.startswith("trunk.")}
        out.weights.update(hw)
        out.spec = spec
    if fim_diag is not None:
        cfg = replace(cfg, weights=tuple(fim_weights(fim_diag)))
    if cfg.epochs == 0:
        return out, {"train_loss": [], "val_loss": [], "best_epoch": 0, "best_val_loss": None}
    xs = _standardize_x(data.features, out)
    ts = _std_targets(data.targets, out)
    trunk, _ = _trunk_forward(xs, out, None)
    rng = np.random.default_rng(cfg.seed)
    history = _fit_loop(out, xs, ts, cfg, out.head_keys(), rng, cfg.epochs, cfg.patience,
                        trunk_cache=trunk)
    history["weights"] = list(_resolve_weights(cfg, out.spec.n_heads))
    return out, history


# ----------------------------------------------------------------------------
# checkpoints

MAGIC = b"TSFCKPT\x00"
VERSION = 1


def save_checkpoint(path, params: NetworkParams, train_config: TrainConfig | None = None,
                    metrics: dict | None = None) -> Path:
    """Write the binary checkpoint and a ``.json`` sidecar next to it."""
    path = Path(path)
    spec_json = params.spec.to_json().encode()
    parts = [MAGIC, struct.pack("<I", VERSION), params.spec.digest(),
             struct.pack("<I", len(spec_json)), spec_json]
    n, d = params.x_mean.size, params.y_mean.size
    parts.append(struct.pack("<II", n, d))
    for arr in (params.x_mean, params.x_std, params.y_mean, params.y_std):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    parts.append(struct.pack("<I", len(params.weights)))
    for name, arr in params.weights.items():
        key = name.encode()
        parts.append(struct.pack("<HB", len(key), arr.ndim) + key)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    path.write_bytes(b"".join(parts))
    sidecar = {
        "format_version": VERSION,
        "spec": json.loads(spec_json),
        "train_config": None if train_config is None else asdict(train_config),
        "metrics": metrics or {},
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True, default=float))
    return path


def load_checkpoint(path) -> NetworkParams:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ParseError(f"{path}: not a tsfine checkpoint")
    off = 8
    (version,) = struct.unpack_from("<I", buf, off)
    off += 4
    if version != VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    digest = buf[off:off + 32]
    off += 32
    (slen,) = struct.unpack_from("<I", buf, off)
    off += 4
    spec_dict = json.loads(buf[off:off + slen])
    off += slen
    spec = NetworkSpec(**spec_dict)
    if spec.digest() != digest:
        raise ParseError(f"{path}: spec hash mismatch")
    n, d = struct.unpack_from("<II", buf, off)
    off += 8
    stats = []
    for size in (n, n, d, d):
        stats.append(np.frombuffer(buf, "<f8", size, off).astype(float))
        off += 8 * size
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    weights = {}
    for _ in range(count):
        klen, ndim = struct.unpack_from("<HB", buf, off)
        off += 3
        name = buf[off:off + klen].decode()
        off += klen
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        weights[name] = np.frombuffer(buf, "<f8", size, off).astype(float).reshape(shape)
        off += 8 * size
    return NetworkParams(spec, weights, *stats)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
