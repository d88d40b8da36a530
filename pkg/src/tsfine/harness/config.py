"""Experiment configuration: YAML files validated with pydantic.

A config names a ``system`` (``vdp`` or ``tanks``); every section it leaves
out is filled from that system's preset, so a file holding only
``system: vdp`` is a complete experiment. Nested sections are merged key by
key, which lets a file override a single field such as ``training.epochs``.
"""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..errors import ConfigError
from ..features import FeatureSpec
from ..ood import AVERAGING_SEEDS
from ..refine import GnConfig
from ..regressor import NetworkSpec, TrainConfig
from ..simulators import SimulatorSpec, gen_prbs
from ..twin import DigitalTwin

__all__ = [
    "ExperimentConfig", "Scenario", "preset", "load_config", "config_hash", "METHODS",
]

METHODS = ("ts_pre", "ts_fine", "ekf_gi", "ekf_ti", "ekf_wi", "pem_gi", "pem_ti", "pem_bi")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PrbsConfig(_Strict):
    low: float
    high: float
    hold: int = Field(ge=1)
    seed: int = 12345

    @model_validator(mode="after")
    def _order(self):
        if self.high < self.low:
            raise ValueError("prbs high < low")
        return self


class SimulatorConfig(_Strict):
    dt: float = Field(gt=0)
    horizon: int = Field(ge=1)
    process_var: float = Field(ge=0)
    measurement_var: float = Field(ge=0)
    x0: tuple[float, ...]
    noise_scaling: Literal["dt", "sqrt_dt"] = "dt"
    prbs: Optional[PrbsConfig] = None


class FeatureConfig(_Strict):
    kind: Literal["ar", "arx"]
    na: int = Field(ge=1)
    nb: int = Field(ge=0, default=0)
    ridge: float = Field(ge=0, default=1e-8)


class NetworkConfig(_Strict):
    trunk_widths: tuple[int, ...]
    trunk_activation: str = "relu"
    trunk_dropout: float = Field(ge=0, lt=1, default=0.1)
    trunk_layernorm: bool = False
    head_depth: int = Field(ge=0, default=2)
    head_width: int = Field(ge=1, default=128)
    head_activation: str = "tanh"
    head_dropout: float = Field(ge=0, lt=1, default=0.1)
    head_layernorm: bool = False


class TrainingConfig(_Strict):
    lr: float = Field(gt=0, default=1e-3)
    batch_size: int = Field(ge=1, default=64)
    epochs: int = Field(ge=0, default=200)
    lambda_orth: float = Field(ge=0, default=0.0)
    huber_delta: float = Field(gt=0, default=1.0)
    patience: Optional[int] = None
    val_fraction: float = Field(gt=0, lt=1, default=0.1)
    seed: int = 1


class OodConfig(_Strict):
    alpha: float = Field(gt=0, lt=1, default=0.10)
    bank_size: int = Field(ge=2, default=150)
    epsilon: Optional[float] = Field(gt=0, default=None)


class GnSettings(_Strict):
    gamma: float = Field(gt=0)
    max_iters: int = Field(ge=1, default=8)
    fd_step: float = Field(gt=0, default=1e-3)
    averaging_seeds: tuple[int, ...] = AVERAGING_SEEDS
    restat_each_iter: bool = False
    step_control: Literal["damping", "halving"] = "damping"


class HeadShape(_Strict):
    depth: int = Field(ge=0)
    width: int = Field(ge=1)
    dropout: float = Field(ge=0, lt=1)


class FinetuneConfig(_Strict):
    m_ft: int = Field(ge=1)
    epochs: int = Field(ge=0, default=100)
    patience: Optional[int] = 10
    lr: float = Field(gt=0, default=1e-3)
    batch_size: int = Field(ge=1, default=64)
    new_head: Optional[HeadShape] = None
    fim_coverage: float = Field(gt=0, lt=1, default=0.95)


class BaselineConfig(_Strict):
    good_init_rel_sd: float = Field(ge=0, default=0.1)
    bad_init_scale: float = Field(gt=0, default=3.0)
    pem_max_iters: int = Field(ge=1, default=50)
    ekf_q_theta: float = Field(ge=0, default=1e-4)
    ekf_p0_theta: float = Field(gt=0, default=0.1)


class Scenario(_Strict):
    name: str
    theta: tuple[float, ...]

    @field_validator("name")
    @classmethod
    def _safe_name(cls, v):
        if not v or any(c in v for c in "/\\ "):
            raise ValueError("scenario names must be nonempty and contain no slashes or spaces")
        return v


class ExperimentConfig(_Strict):
    system: Literal["vdp", "tanks"]
    box: tuple[tuple[float, float], ...]
    m: int = Field(ge=1)
    simulator: SimulatorConfig
    features: FeatureConfig
    network: NetworkConfig
    training: TrainingConfig
    ood: OodConfig = OodConfig()
    gn: GnSettings
    finetune: FinetuneConfig
    baselines: BaselineConfig = BaselineConfig()
    scenarios: tuple[Scenario, ...]
    n_mc: int = Field(ge=1, default=100)
    methods: tuple[str, ...] = METHODS
    master_seed: int = 0
    report_timing: bool = False

    @model_validator(mode="before")
    @classmethod
    def _fill_from_preset(cls, data):
        if isinstance(data, dict) and data.get("system") in _PRESETS:
            return _merge(_PRESETS[data["system"]], data)
        return data

    @model_validator(mode="after")
    def _check(self):
        if any(lo > hi for lo, hi in self.box):
            raise ValueError("box bounds must satisfy lo <= hi")
        d = len(self.box)
        names = [s.name for s in self.scenarios]
        if not names:
            raise ValueError("at least one scenario is required")
        if len(set(names)) != len(names):
            raise ValueError("scenario names must be unique")
        for s in self.scenarios:
            if len(s.theta) != d:
                raise ValueError(f"scenario {s.name}: theta has {len(s.theta)} entries, box has {d}")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        if self.system == "tanks" and self.simulator.prbs is None:
            raise ValueError("the tanks system needs a prbs input section")
        return self

    # -- derived runtime objects ------------------------------------------------

    @property
    def n_params(self) -> int:
        return len(self.box)

    def scenario(self, name: str | None) -> Scenario:
        if name is None:
            return self.scenarios[0]
        for s in self.scenarios:
            if s.name == name:
                return s
        raise ConfigError(f"unknown scenario {name!r}; have {[s.name for s in self.scenarios]}")

    def simulator_spec(self) -> SimulatorSpec:
        sc = self.simulator
        nx = len(sc.x0)
        if self.system == "vdp":
            pvar = (0.0, sc.process_var)
            bounds = ((0.0, np.inf),)
        else:
            pvar = (sc.process_var,) * nx
            bounds = ((1e-6, np.inf),) * self.n_params
        return SimulatorSpec(self.system, sc.dt, sc.horizon, pvar, sc.measurement_var, sc.x0,
                             bounds, noise_scaling=sc.noise_scaling)

    def inputs(self) -> np.ndarray:
        p = self.simulator.prbs
        if p is None:
            return np.zeros(self.simulator.horizon)
        return gen_prbs((p.low, p.high), p.hold, self.simulator.horizon, p.seed)

    def feature_spec(self) -> FeatureSpec:
        f = self.features
        return FeatureSpec(f.kind, f.na, f.nb, f.ridge)

    def twin(self) -> DigitalTwin:
        return DigitalTwin(self.simulator_spec(), self.feature_spec(), self.inputs())

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(self.feature_spec().dim(self.simulator.horizon),
                           n_heads=self.n_params, **self.network.model_dump())

    def train_config(self) -> TrainConfig:
        t = self.training
        return TrainConfig(lr=t.lr, batch_size=t.batch_size, epochs=t.epochs,
                           lambda_orth=t.lambda_orth, huber_delta=t.huber_delta, seed=t.seed,
                           patience=t.patience, val_fraction=t.val_fraction)

    def finetune_train_config(self, seed: int) -> TrainConfig:
        f = self.finetune
        return TrainConfig(lr=f.lr, batch_size=f.batch_size, epochs=f.epochs,
                           lambda_orth=self.training.lambda_orth,
                           huber_delta=self.training.huber_delta, seed=seed,
                           patience=f.patience, val_fraction=self.training.val_fraction)

    def gn_config(self) -> GnConfig:
        g = self.gn
        return GnConfig(gamma=g.gamma, max_iters=g.max_iters, fd_step=g.fd_step,
                        seeds=g.averaging_seeds, bank_size=self.ood.bank_size,
                        epsilon=self.ood.epsilon, restat_each_iter=g.restat_each_iter,
                        step_control=g.step_control)

    def box_half_widths(self) -> np.ndarray:
        b = np.asarray(self.box, dtype=float)
        return 0.5 * (b[:, 1] - b[:, 0])

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


_PRESETS = {
    "vdp": {
        "system": "vdp",
        "box": [[0.0, 2.5]],
        "m": 10000,
        "simulator": {"dt": 0.05, "horizon": 300, "process_var": 0.02, "measurement_var": 0.0,
                      "x0": [1.0, 0.0]},
        "features": {"kind": "ar", "na": 5, "nb": 0, "ridge": 1e-8},
        "network": {"trunk_widths": [256, 128], "trunk_activation": "relu", "trunk_dropout": 0.1,
                    "head_depth": 2, "head_width": 128, "head_activation": "tanh",
                    "head_dropout": 0.1},
        "training": {"epochs": 200, "lambda_orth": 0.0},
        "gn": {"gamma": 1e-3},
        "finetune": {"m_ft": 400},
        "scenarios": [{"name": "ood1", "theta": [3.0]}, {"name": "ood2", "theta": [5.0]}],
    },
    "tanks": {
        "system": "tanks",
        "box": [[0.4, 0.8], [0.4, 0.8], [0.4, 0.8], [0.8, 1.2]],
        "m": 10000,
        "simulator": {"dt": 0.5, "horizon": 400, "process_var": 0.01, "measurement_var": 0.02,
                      "x0": [0.0, 0.0], "prbs": {"low": 0.0, "high": 3.0, "hold": 30, "seed": 12345}},
        "features": {"kind": "arx", "na": 64, "nb": 64, "ridge": 1e-6},
        "network": {"trunk_widths": [256, 256], "trunk_activation": "leaky_relu",
                    "trunk_dropout": 0.15, "trunk_layernorm": True, "head_depth": 3,
                    "head_width": 64, "head_activation": "tanh", "head_dropout": 0.15,
                    "head_layernorm": True},
        "training": {"epochs": 250, "lambda_orth": 5e-4},
        "gn": {"gamma": 1e-4},
        "finetune": {"m_ft": 1000, "new_head": {"depth": 1, "width": 64, "dropout": 0.2}},
        "scenarios": [{"name": "ood1", "theta": [1.2, 1.2, 0.9, 1.0]},
                      {"name": "ood2", "theta": [1.3, 1.3, 0.6, 0.7]}],
    },
}


def preset(system: str, **overrides) -> ExperimentConfig:
    """The full default experiment for ``system``, with optional top-level overrides."""
    if system not in _PRESETS:
        raise ConfigError(f"unknown system {system!r}")
    return _validate({"system": system, **overrides})


def _validate(data) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    return _validate(data)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
