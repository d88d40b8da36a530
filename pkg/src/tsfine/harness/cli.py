"""``tsfine`` command line entry point."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from ..errors import ConfigError, TsFineError
from ..ood import build_bank, ood_test
from ..regressor import file_sha256, load_checkpoint, save_checkpoint
from ..seeding import derive_seed
from .config import ExperimentConfig, load_config, preset
from .evaluate import (build_manifest, build_report, dump_json, mean_trajectories, obs_seed,
                       results_table, run_mc, write_table, write_trajectories)
from .io import read_trajectory_csv, write_bank, write_trajectory_csv
from .pipeline import estimate, finetune_observation, pretrain

log = logging.getLogger("tsfine")


def _config(args) -> ExperimentConfig:
    src = args.config
    if src in ("vdp", "tanks") and not Path(src).exists():
        cfg = preset(src)
    else:
        cfg = load_config(src)
    if getattr(args, "seed", None) is not None:
        cfg = ExperimentConfig.model_validate({**cfg.to_dict(), "master_seed": args.seed})
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _observation(args, cfg):
    twin = cfg.twin()
    z = read_trajectory_csv(args.obs, cfg.simulator.dt, cfg.simulator.horizon)
    if not np.allclose(z.inputs, twin.inputs):
        log.warning("observation inputs differ from the configured excitation")
    return z, twin.compress(z.outputs)[0]


def _obs_key(path) -> int:
    return int.from_bytes(hashlib.sha256(Path(path).read_bytes()).digest()[:8], "little")


def cmd_pretrain(args):
    cfg = _config(args)
    out = _out(args)
    params, bank, history = pretrain(cfg)
    ckpt = out / "checkpoint.bin"
    metrics = {
        "final_train_loss": history["train_loss"][-1] if history["train_loss"] else None,
        "best_val_loss": history.get("best_val_loss"),
        "best_epoch": history.get("best_epoch"),
    }
    save_checkpoint(ckpt, params, cfg.train_config(), metrics)
    write_bank(out / "bank.bin", bank)
    sha = file_sha256(ckpt)
    dump_json(out / "manifest.json", build_manifest(cfg, "pretrain", sha, {"training": metrics}))
    print(f"checkpoint {ckpt} sha256 {sha}")
    return 0


def cmd_simulate(args):
    cfg = _config(args)
    sc = cfg.scenario(args.scenario)
    theta = np.asarray(args.theta if args.theta else sc.theta, dtype=float)
    seed = obs_seed(cfg, sc.name, args.index)
    z = cfg.twin().simulate(theta, seed)
    path = write_trajectory_csv(_out(args) / f"observation_{sc.name}_{args.index}.csv", z)
    print(path)
    return 0


def cmd_estimate(args):
    cfg = _config(args)
    params = load_checkpoint(args.checkpoint)
    _, x = _observation(args, cfg)
    theta = estimate(params, x, cfg)
    dump_json(_out(args) / "estimate.json", {"theta_pre": theta.tolist(),
                                             "checkpoint_sha256": file_sha256(args.checkpoint)})
    print(" ".join(f"{v:.6g}" for v in theta))
    return 0


def cmd_ood_test(args):
    cfg = _config(args)
    params = load_checkpoint(args.checkpoint)
    _, x = _observation(args, cfg)
    theta = estimate(params, x, cfg)
    bank = build_bank(theta, cfg.ood.bank_size, cfg.twin(),
                      derive_seed(cfg.master_seed, "ood", _obs_key(args.obs)))
    dec = ood_test(x, bank, cfg.ood.epsilon, cfg.ood.alpha)
    dump_json(_out(args) / "ood.json", {"theta_pre": theta.tolist(), **dec.to_json()})
    print("OOD" if dec.is_ood else "in-distribution", f"S_obs={dec.s_obs:.4g} q={dec.threshold:.4g}")
    return 0


def cmd_finetune(args):
    cfg = _config(args)
    out = _out(args)
    src = Path(args.checkpoint)
    params = load_checkpoint(src)
    _, x = _observation(args, cfg)
    result = finetune_observation(x, params, cfg, _obs_key(args.obs))
    dst = out / "checkpoint.bin"
    if result.skipped:
        # the gate accepted: deploy the pretrained estimator byte for byte
        if dst.resolve() != src.resolve():
            shutil.copyfile(src, dst)
            if src.with_suffix(".json").exists():
                shutil.copyfile(src.with_suffix(".json"), dst.with_suffix(".json"))
    else:
        save_checkpoint(dst, result.params, cfg.finetune_train_config(0),
                        {"finetuned_from": file_sha256(src)})
    report = result.to_json()
    report.update(input_sha256=file_sha256(src), output_sha256=file_sha256(dst))
    dump_json(out / "finetune_report.json", report)
    action = "skip fine-tuning" if result.skipped else "fine-tuned"
    print(action, " ".join(f"{v:.6g}" for v in result.theta_fine))
    return 0


def cmd_evaluate(args):
    cfg = _config(args)
    out = _out(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.bin"
    if not ckpt.exists():
        raise ConfigError(f"checkpoint {ckpt} not found; run `tsfine pretrain` first")
    params = load_checkpoint(ckpt)
    mc = run_mc(cfg, params, args.scenario, args.n_mc, args.jobs)
    rows = results_table(mc)
    sha = file_sha256(ckpt)
    write_table(out / "table.csv", rows, cfg.report_timing)
    cols, ys = mean_trajectories(mc, cfg)
    write_trajectories(out / f"trajectories_{mc.scenario.name}.csv", cols, ys)
    dump_json(out / "report.json", build_report(mc, rows, cfg, sha))
    dump_json(out / "manifest.json",
              build_manifest(cfg, "evaluate", sha, {"scenario": mc.scenario.name,
                                                    "n_mc": len(mc.runs)}))
    for r in rows:
        print(f"{r['method']:<9}{r['init']:<3} mse={r['mse']:.4g}")
    return 0


def cmd_report(args):
    path = Path(args.out) / "report.json"
    if not path.exists():
        raise ConfigError(f"{path} not found; run `tsfine evaluate` first")
    rep = json.loads(path.read_text())
    lines = [f"scenario {rep['scenario']}  theta0 {rep['theta0']}",
             "| method | init | MSE | ms |", "|---|---|---|---|"]
    for r in rep["table"]:
        lines.append(f"| {r['method']} | {r['init'] or '-'} | {r['mse']:.4g} | {r['ms']:.1f} |")
    lines.append(f"gate skipped {rep['gate']['skipped']} of {len(rep['runs'])} runs; "
                 f"GN monotonicity violations {rep['gn_monotone_violations']}")
    text = "\n".join(lines) + "\n"
    (Path(args.out) / "table.md").write_text(text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsfine", description="Two-stage estimation with OOD fine-tuning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, config=True, obs=False, ckpt=False):
        s = sub.add_parser(name, help=help_)
        if config:
            s.add_argument("--config", required=True, help="YAML file, or the preset name vdp/tanks")
            s.add_argument("--seed", type=int, default=None, help="override the master seed")
        s.add_argument("--out", default=".", help="output directory")
        if obs:
            s.add_argument("--obs", required=True, help="observation CSV (step,u,y)")
        if ckpt:
            s.add_argument("--checkpoint", required=name != "evaluate", default=None)
        s.set_defaults(func=fn)
        return s

    add("pretrain", cmd_pretrain, "sample the box, simulate, train the estimator")
    s = add("simulate", cmd_simulate, "write a synthetic observation CSV")
    s.add_argument("--scenario", default=None)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--theta", type=float, nargs="+", default=None)
    add("estimate", cmd_estimate, "TS-pre estimate for one observation", obs=True, ckpt=True)
    add("ood-test", cmd_ood_test, "feature-space OOD test for one observation", obs=True, ckpt=True)
    add("finetune", cmd_finetune, "gate, refine and fine-tune on one observation", obs=True, ckpt=True)
    s = add("evaluate", cmd_evaluate, "Monte-Carlo comparison table", ckpt=True)
    s.add_argument("--scenario", default=None)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--n-mc", type=int, default=None)
    add("report", cmd_report, "print the table of a finished evaluation", config=False)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TsFineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
