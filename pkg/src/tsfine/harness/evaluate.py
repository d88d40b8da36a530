"""Monte-Carlo comparison of TS-pre, TS-fine and the baselines, plus emitters."""
from __future__ import annotations

import csv
import io
import json
import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..baselines import DualEkfConfig, PemConfig, bad_init, dual_ekf, good_init, pem
from ..regressor import NetworkParams
from ..seeding import derive_seed
from .config import ExperimentConfig, Scenario, config_hash
from .pipeline import estimate, finetune_observation

log = logging.getLogger(__name__)

__all__ = [
    "RunRecord", "McResult", "run_one", "run_mc", "results_table",
    "mean_trajectories", "write_table", "write_trajectories", "build_report", "build_manifest",
    "LABELS",
]

LABELS = {
    "ts_pre": ("TS-pre", ""),
    "ts_fine": ("TS-fine", ""),
    "ekf_gi": ("dual-EKF", "GI"),
    "ekf_ti": ("dual-EKF", "TI"),
    "ekf_wi": ("dual-EKF", "WI"),
    "pem_gi": ("PEM", "GI"),
    "pem_ti": ("PEM", "TI"),
    "pem_bi": ("PEM", "BI"),
}


@dataclass(eq=False)
class RunRecord:
    index: int
    obs_seed: int
    estimates: dict
    seconds: dict
    flags: dict = field(default_factory=dict)
    gate_skipped: bool = False
    gn_trace: list = field(default_factory=list)


@dataclass(eq=False)
class McResult:
    scenario: Scenario
    methods: tuple
    runs: list

    def estimates(self, method) -> np.ndarray:
        return np.array([r.estimates[method] for r in self.runs])


def obs_seed(cfg: ExperimentConfig, scenario: str, index: int) -> int:
    return derive_seed(cfg.master_seed, scenario, "obs", index)


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def run_one(cfg: ExperimentConfig, params: NetworkParams, scenario: Scenario, index: int) -> RunRecord:
    """One Monte-Carlo run: a fresh observation and every configured method."""
    twin = cfg.twin()
    spec = twin.sim
    theta0 = np.asarray(scenario.theta, dtype=float)
    seed = obs_seed(cfg, scenario.name, index)
    z = twin.simulate(theta0, seed)
    x = twin.compress(z.outputs)[0]
    bc = cfg.baselines
    rng = np.random.default_rng(derive_seed(cfg.master_seed, scenario.name, "gi", index))
    gi = good_init(theta0, rng, bc.good_init_rel_sd, spec.bounds)
    bi = bad_init(theta0, cfg.box, bc.bad_init_scale)
    theta_pre, t_pre = _timed(lambda: estimate(params, x, cfg))

    est, secs, flags = {}, {}, {}
    rec = RunRecord(index, seed, est, secs, flags)
    for method in cfg.methods:
        if method == "ts_pre":
            est[method], secs[method] = theta_pre, t_pre
        elif method == "ts_fine":
            out, secs[method] = _timed(lambda: finetune_observation(x, params, cfg, seed))
            est[method] = out.theta_fine
            rec.gate_skipped = out.skipped
            if out.gn is not None:
                rec.gn_trace = [float(v) for v in out.gn.trace]
                flags[method] = bool(out.gn.line_search_failed)
        elif method.startswith("ekf_"):
            init = {"ekf_gi": gi, "ekf_ti": theta_pre, "ekf_wi": bi}[method]
            ecfg = DualEkfConfig(init, p0_theta=bc.ekf_p0_theta, q_theta=bc.ekf_q_theta)
            res, secs[method] = _timed(lambda: dual_ekf(z, spec, ecfg))
            est[method], flags[method] = res.theta, bool(res.blowup)
        else:
            init = {"pem_gi": gi, "pem_ti": theta_pre, "pem_bi": bi}[method]
            pcfg = PemConfig(init, max_iters=bc.pem_max_iters)
            res, secs[method] = _timed(lambda: pem(z, spec, pcfg))
            est[method], flags[method] = res.theta, bool(res.diverged)
    for k in est:
        est[k] = np.asarray(est[k], dtype=float)
    return rec


def _run_chunk(args):
    cfg_dict, params, scenario_name, indices = args
    cfg = ExperimentConfig.model_validate(cfg_dict)
    scenario = cfg.scenario(scenario_name)
    return [run_one(cfg, params, scenario, i) for i in indices]


def run_mc(cfg: ExperimentConfig, params: NetworkParams, scenario: str | None = None,
           n_mc: int | None = None, jobs: int = 1) -> McResult:
    """Run ``n_mc`` independent seeded runs; the result is ordered by run index.

    With ``jobs > 1`` the runs are spread over a process pool. Every run
    derives its randomness from (master seed, scenario, index) only, so the
    pool size does not change any number.
    """
    sc = cfg.scenario(scenario)
    n = cfg.n_mc if n_mc is None else n_mc
    if jobs <= 1:
        runs = [run_one(cfg, params, sc, i) for i in range(n)]
    else:
        chunks = [list(range(n))[j::jobs] for j in range(jobs)]
        payload = [(cfg.to_dict(), params, sc.name, c) for c in chunks if c]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = [r for part in pool.map(_run_chunk, payload) for r in part]
    runs.sort(key=lambda r: r.index)
    return McResult(sc, tuple(cfg.methods), runs)


def results_table(mc: McResult) -> list[dict]:
    """One row per (method, init) with MSE = mean of ``|theta_hat - theta_0|^2`` over runs."""
    theta0 = np.asarray(mc.scenario.theta, dtype=float)
    rows = []
    for method in mc.methods:
        est = mc.estimates(method)
        ok = np.all(np.isfinite(est), axis=1)
        err = np.sum((est[ok] - theta0) ** 2, axis=1)
        flagged = sum(bool(r.flags.get(method, False)) for r in mc.runs)
        name, init = LABELS[method]
        rows.append({
            "key": method,
            "method": name,
            "init": init,
            "mse": float(err.mean()) if err.size else float("nan"),
            "ms": 1e3 * float(np.mean([r.seconds[method] for r in mc.runs])),
            "n_runs": len(mc.runs),
            "n_nonfinite": int((~ok).sum()),
            "n_flagged": int(flagged),
        })
    return rows


def mean_trajectories(mc: McResult, cfg: ExperimentConfig) -> tuple[list, np.ndarray]:
    """Noise-free outputs at the truth and at each method's mean estimate."""
    twin = cfg.twin()
    cols = ["truth"] + [_col(m) for m in mc.methods]
    ys = [twin.simulate(mc.scenario.theta, 0, noise=False).outputs]
    for m in mc.methods:
        mean = np.nanmean(mc.estimates(m), axis=0)
        ys.append(twin.outputs(mean[None], [0], noise=False, on_nonfinite="nan")[0])
    return cols, np.column_stack(ys)


def _col(method):
    name, init = LABELS[method]
    return f"{name}({init})" if init else name


def _fmt(v: float) -> str:
    return "nan" if not np.isfinite(v) else f"{v:.6e}"


def write_table(path, rows: list[dict], timing: bool = False) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "init", "mse", "ms"])
    for r in rows:
        w.writerow([r["method"], r["init"], _fmt(r["mse"]), f"{r['ms']:.3f}" if timing else ""])
    path = Path(path)
    path.write_text(buf.getvalue())
    return path


def write_trajectories(path, cols, ys) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step"] + cols)
    for k, row in enumerate(ys):
        w.writerow([k] + [_fmt(v) for v in row])
    path = Path(path)
    path.write_text(buf.getvalue())
    return path


def _monotone_violations(trace) -> int:
    return int(sum(b > a for a, b in zip(trace, trace[1:])))


def build_report(mc: McResult, rows: list[dict], cfg: ExperimentConfig, checkpoint_sha: str) -> dict:
    return {
        "scenario": mc.scenario.name,
        "theta0": list(mc.scenario.theta),
        "config_hash": config_hash(cfg),
        "checkpoint_sha256": checkpoint_sha,
        "table": rows,
        "mean_estimates": {m: np.nanmean(mc.estimates(m), axis=0).tolist() for m in mc.methods},
        "gate": {
            "skipped": int(sum(r.gate_skipped for r in mc.runs)),
            "ood": int(sum(not r.gate_skipped for r in mc.runs)) if "ts_fine" in mc.methods else 0,
        },
        "gn_monotone_violations": int(sum(_monotone_violations(r.gn_trace) for r in mc.runs)),
        "runs": [
            {
                "index": r.index,
                "obs_seed": r.obs_seed,
                "estimates": {k: v.tolist() for k, v in r.estimates.items()},
                "ms": {k: 1e3 * v for k, v in r.seconds.items()},
                "flags": r.flags,
                "gate_skipped": r.gate_skipped,
                "gn_trace": r.gn_trace,
            }
            for r in mc.runs
        ],
    }


def build_manifest(cfg: ExperimentConfig, command: str, checkpoint_sha: str | None = None,
                   extra: dict | None = None) -> dict:
    """Everything needed to repeat a run: config, its hash, seed families, versions."""
    return {
        "command": command,
        "config_hash": config_hash(cfg),
        "config": cfg.to_dict(),
        "master_seed": cfg.master_seed,
        "seed_families": {
            "pretrain": "derive_seed(master, 'pretrain', 'theta' | 'sim', i)",
            "observation": "derive_seed(master, scenario, 'obs', run)",
            "good_init": "derive_seed(master, scenario, 'gi', run)",
            "ood_bank": "derive_seed(master, 'ood', obs_seed) + k",
            "gn_banks": "derive_seed(derive_seed(master, 'gn', obs_seed), 'gn', tag) + k",
            "cloud": "derive_seed(master, 'cloud', obs_seed)",
            "finetune_sims": "derive_seed(derive_seed(master, 'ftset', obs_seed), 'finetune', k)",
            "finetune_train": "derive_seed(master, 'fttrain', obs_seed)",
            "averaging": list(cfg.gn.averaging_seeds),
        },
        "checkpoint_sha256": checkpoint_sha,
        "software": {
            "tsfine": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "defaults": {
            "noise_generator": "Philox keyed by seed, (N, nx+1) standard normal block",
            "noise_scaling": cfg.simulator.noise_scaling,
            "quantile_rank": "ceil(level * K)",
            "ood_epsilon": "1e-6 * trace(S_raw) / n" if cfg.ood.epsilon is None else cfg.ood.epsilon,
            "fim_ridge": "1e-6 * trace(J^T J) / d",
            "good_init": f"theta0 + N(0, ({cfg.baselines.good_init_rel_sd} |theta0|)^2)",
            "bad_init": f"far corner of {cfg.baselines.bad_init_scale}x box",
            "sensitivity_cap": "box half-width",
            "gn_metric": "re-estimated each iteration" if cfg.gn.restat_each_iter else "frozen at theta_init",
            "gn_step_control": cfg.gn.step_control,
            "finetune_trunk": "frozen, eval mode",
        },
        **(extra or {}),
    }


def dump_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")
