"""Offline pretraining and the per-observation estimate / gate / fine-tune path."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..ood import OodDecision, build_bank, feature_stats, ood_test, whitened_dists
from ..refine import (GnResult, SampleCloud, build_finetune_set, fisher_matrix, gauss_newton,
                      sample_hybrid, sensitivity_scales)
from ..regressor import LabeledSet, NetworkParams, finetune_heads, train
from ..seeding import derive_seed
from .config import ExperimentConfig
from .io import OfflineBank

log = logging.getLogger(__name__)

__all__ = ["pretrain", "estimate", "FinetuneOutcome", "finetune_observation"]


def pretrain(cfg: ExperimentConfig):
    """Sample ``m`` parameters uniformly from the box, simulate, compress, train.

    Returns ``(params, bank, history)``.
    """
    twin = cfg.twin()
    box = np.asarray(cfg.box, dtype=float)
    rng = np.random.default_rng(derive_seed(cfg.master_seed, "pretrain", "theta"))
    thetas = rng.uniform(box[:, 0], box[:, 1], size=(cfg.m, cfg.n_params))
    seeds = np.array([derive_seed(cfg.master_seed, "pretrain", "sim", i) for i in range(cfg.m)],
                     dtype=np.uint64)
    outputs = twin.outputs(thetas, seeds)
    feats = twin.compress(outputs)
    log.info("pretraining bank: %d pairs, %d features", cfg.m, feats.shape[1])
    params, history = train(LabeledSet(feats, thetas), cfg.network_spec(), cfg.train_config())
    bank = OfflineBank(twin.inputs, seeds, thetas, outputs, feats)
    return params, bank, history


def estimate(params: NetworkParams, x, cfg: ExperimentConfig) -> np.ndarray:
    """TS-pre estimate for one feature vector, clipped to the physical bounds."""
    return cfg.simulator_spec().clip(params.predict(np.asarray(x, dtype=float)))


@dataclass(eq=False)
class FinetuneOutcome:
    theta_pre: np.ndarray
    theta_fine: np.ndarray
    decision: OodDecision
    params: NetworkParams
    skipped: bool
    gn: GnResult | None = None
    cloud: SampleCloud | None = None
    history: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "skipped": self.skipped,
            "decision": self.decision.to_json(),
            "theta_pre": self.theta_pre.tolist(),
            "theta_fine": self.theta_fine.tolist(),
        }
        if self.gn is not None:
            out["gauss_newton"] = self.gn.to_json()
        if self.cloud is not None:
            summary = self.cloud.to_json()
            summary.pop("samples")
            summary.pop("provenance")
            out["cloud"] = summary
        if self.history:
            out["finetune"] = {
                "train_loss": [float(v) for v in self.history.get("train_loss", [])],
                "val_loss": [float(v) for v in self.history.get("val_loss", [])],
                "best_epoch": self.history.get("best_epoch"),
                "weights": [float(w) for w in self.history.get("weights", [])],
            }
        return out


def finetune_observation(x_obs, params: NetworkParams, cfg: ExperimentConfig, key) -> FinetuneOutcome:
    """Gate, refine and fine-tune for one observed feature vector.

    ``key`` seeds every random draw of this call (bank, GN banks, cloud,
    fine-tune simulations, head training), so two calls with the same key
    agree bit for bit. When the gate accepts, the returned ``params`` is the
    input object itself.
    """
    twin = cfg.twin()
    x_obs = np.asarray(x_obs, dtype=float)
    theta_pre = estimate(params, x_obs, cfg)
    bank = build_bank(theta_pre, cfg.ood.bank_size, twin, derive_seed(cfg.master_seed, "ood", key))
    stats = feature_stats(bank, cfg.ood.epsilon)
    decision = ood_test(x_obs, bank, alpha=cfg.ood.alpha, stats=stats)
    if not decision.is_ood:
        return FinetuneOutcome(theta_pre, theta_pre.copy(), decision, params, True)

    gn = gauss_newton(theta_pre, x_obs, twin, cfg.gn_config(), stats=stats,
                      bank_seed=derive_seed(cfg.master_seed, "gn", key))
    fim = fisher_matrix(gn.jacobian)
    dists = np.sqrt(whitened_dists(bank, stats))
    scales = sensitivity_scales(gn.jacobian, gn.delta_misfit, dists, gn.theta_gn,
                                cap=cfg.box_half_widths())
    cloud = sample_hybrid(gn.theta_gn, fim, scales, cfg.finetune.m_ft,
                          derive_seed(cfg.master_seed, "cloud", key), twin.sim.bounds)
    data = build_finetune_set(cloud, twin, derive_seed(cfg.master_seed, "ftset", key))
    head = cfg.finetune.new_head.model_dump() if cfg.finetune.new_head else None
    tcfg = cfg.finetune_train_config(derive_seed(cfg.master_seed, "fttrain", key))
    tuned, history = finetune_heads(data, params, tcfg, np.diag(fim), head)
    theta_fine = estimate(tuned, x_obs, cfg)
    return FinetuneOutcome(theta_pre, theta_fine, decision, tuned, False, gn, cloud, history)
