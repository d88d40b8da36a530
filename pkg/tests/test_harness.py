import csv
import json

import numpy as np
import pytest
import yaml

from tsfine.errors import ConfigError, DegenerateTarget, ParseError, ShapeMismatch
from tsfine.harness import ExperimentConfig, load_config, preset, pretrain
from tsfine.harness.cli import main
from tsfine.harness.config import config_hash
from tsfine.harness.evaluate import results_table, run_mc
from tsfine.harness.io import OfflineBank, read_bank, read_trajectory_csv, write_bank, write_trajectory_csv
from tsfine.regressor import load_checkpoint
from tsfine.simulators import simulate, vdp_spec

TINY = {
    "system": "vdp",
    "m": 300,
    "network": {"trunk_widths": [16, 8], "head_width": 8},
    "training": {"epochs": 3},
    "finetune": {"m_ft": 40, "epochs": 5},
    "n_mc": 2,
}


@pytest.fixture(scope="module")
def tiny_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny")
    (d / "tiny.yaml").write_text(yaml.safe_dump(TINY))
    assert main(["pretrain", "--config", str(d / "tiny.yaml"), "--out", str(d)]) == 0
    return d


def test_presets_carry_experiment_constants():
    v = preset("vdp")
    assert v.m == 10000 and v.simulator.horizon == 300 and v.simulator.dt == 0.05
    assert v.ood.alpha == 0.10 and v.ood.bank_size == 150
    assert v.gn.gamma == 1e-3 and v.finetune.m_ft == 400 and v.n_mc == 100
    assert v.gn.averaging_seeds == (8000, 8001, 8002)
    assert v.scenario("ood1").theta == (3.0,)
    t = preset("tanks")
    assert t.gn.gamma == 1e-4 and t.finetune.m_ft == 1000 and t.simulator.horizon == 400
    assert t.training.lambda_orth == 5e-4 and t.features.na == 64 and t.features.nb == 64
    assert t.scenario("ood1").theta == (1.2, 1.2, 0.9, 1.0)
    assert t.twin().n_features == 128


def test_config_rejects_bad_input(tmp_path):
    with pytest.raises(ConfigError):
        preset("vdp", bogus=1)
    with pytest.raises(ConfigError):
        preset("pendulum")
    bad = tmp_path / "bad.yaml"
    bad.write_text("system: vdp\nm: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    bad.write_text("- just a list\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        preset("vdp", ood={"alpha": 1.5})


def test_config_merge_and_hash(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"system": "vdp", "gn": {"max_iters": 3}}))
    cfg = load_config(path)
    assert cfg.gn.max_iters == 3 and cfg.gn.gamma == 1e-3
    assert config_hash(cfg) == config_hash(load_config(path))
    assert config_hash(cfg) != config_hash(preset("vdp"))


def test_trajectory_csv_roundtrip(tmp_path):
    z = simulate([1.0], vdp_spec(), 3)
    path = write_trajectory_csv(tmp_path / "z.csv", z)
    back = read_trajectory_csv(path, 0.05, 300)
    assert np.array_equal(back.outputs, z.outputs) and np.array_equal(back.inputs, z.inputs)
    with pytest.raises(ShapeMismatch):
        read_trajectory_csv(path, 0.05, 301)


@pytest.mark.parametrize("body, line", [
    ("step,u,x\n0,0,1\n", 1),
    ("step,u,y\n0,0,1\n1,0\n", 3),
    ("step,u,y\n0,0,1\n1,0,abc\n", 3),
    ("step,u,y\n0,0,1\n2,0,1\n", 3),
    ("step,u,y\n0,0,nan\n", 2),
    ("step,u,y\n", 1),
])
def test_trajectory_csv_errors_carry_line(tmp_path, body, line):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(ParseError) as info:
        read_trajectory_csv(path, 0.05)
    assert info.value.line == line and f"line {line}" in str(info.value)


def test_bank_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    bank = OfflineBank(rng.normal(size=7), np.array([2**40, 5, 9], dtype=np.uint64),
                       rng.normal(size=(3, 2)), rng.normal(size=(3, 7)), rng.normal(size=(3, 4)))
    path = write_bank(tmp_path / "b.bin", bank)
    back = read_bank(path)
    for name in ("inputs", "seeds", "thetas", "outputs", "features"):
        assert np.array_equal(getattr(back, name), getattr(bank, name))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ParseError):
        read_bank(path)
    with pytest.raises(ShapeMismatch):
        OfflineBank(np.zeros(3), np.zeros(2, dtype=np.uint64), np.zeros((3, 1)),
                    np.zeros((3, 3)), np.zeros((3, 2)))


def test_single_sample_pretrain_is_degenerate():
    with pytest.raises(DegenerateTarget):
        pretrain(preset("vdp", m=1, training={"epochs": 1}))


def test_pretrain_outputs_and_determinism(tiny_dir, tmp_path):
    for name in ("checkpoint.bin", "checkpoint.json", "bank.bin", "manifest.json"):
        assert (tiny_dir / name).exists()
    bank = read_bank(tiny_dir / "bank.bin")
    assert bank.features.shape == (300, 5) and bank.thetas.min() >= 0 and bank.thetas.max() <= 2.5
    assert main(["pretrain", "--config", str(tiny_dir / "tiny.yaml"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "checkpoint.bin").read_bytes() == (tiny_dir / "checkpoint.bin").read_bytes()
    man = json.loads((tiny_dir / "manifest.json").read_text())
    assert man["master_seed"] == 0 and man["defaults"]["gn_step_control"] == "damping"


def test_cli_observation_commands(tiny_dir, capsys):
    cfg = str(tiny_dir / "tiny.yaml")
    out = str(tiny_dir)
    ckpt = str(tiny_dir / "checkpoint.bin")
    assert main(["simulate", "--config", cfg, "--out", out, "--theta", "1.5", "--index", "4"]) == 0
    obs = capsys.readouterr().out.strip()
    assert main(["estimate", "--config", cfg, "--out", out, "--obs", obs, "--checkpoint", ckpt]) == 0
    est = json.loads((tiny_dir / "estimate.json").read_text())
    assert 0.0 <= est["theta_pre"][0] <= 2.5
    assert main(["ood-test", "--config", cfg, "--out", out, "--obs", obs, "--checkpoint", ckpt]) == 0
    dec = json.loads((tiny_dir / "ood.json").read_text())
    assert dec["K"] == 150 and dec["alpha"] == 0.1
    ft_dir = tiny_dir / "ft"
    assert main(["finetune", "--config", cfg, "--out", str(ft_dir), "--obs", obs,
                 "--checkpoint", ckpt]) == 0
    rep = json.loads((ft_dir / "finetune_report.json").read_text())
    assert rep["skipped"] == (not dec["is_ood"])
    assert (rep["input_sha256"] == rep["output_sha256"]) == rep["skipped"]


def test_cli_errors_exit_two(tiny_dir, tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("step,u,y\n0,0,zz\n")
    code = main(["estimate", "--config", str(tiny_dir / "tiny.yaml"), "--out", str(tmp_path),
                 "--obs", str(bad), "--checkpoint", str(tiny_dir / "checkpoint.bin")])
    assert code == 2 and "line 2" in capsys.readouterr().err
    assert main(["evaluate", "--config", "vdp", "--out", str(tmp_path)]) == 2
    assert main(["report", "--out", str(tmp_path)]) == 2


def test_evaluate_table_trajectories_and_report(tiny_dir, capsys):
    cfg = str(tiny_dir / "tiny.yaml")
    runs = {}
    for tag in ("a", "b"):
        out = tiny_dir / f"eval_{tag}"
        assert main(["evaluate", "--config", cfg, "--out", str(out), "--scenario", "ood1",
                     "--checkpoint", str(tiny_dir / "checkpoint.bin"), "--n-mc", "1"]) == 0
        runs[tag] = out
    table = (runs["a"] / "table.csv").read_bytes()
    assert table == (runs["b"] / "table.csv").read_bytes()
    rows = list(csv.reader(table.decode().splitlines()))
    assert rows[0] == ["method", "init", "mse", "ms"] and len(rows) == 9
    with open(runs["a"] / "trajectories_ood1.csv") as fh:
        traj = list(csv.reader(fh))
    assert len(traj) == 301 and traj[0][:2] == ["step", "truth"] and len(traj[0]) == 10
    assert main(["report", "--out", str(runs["a"])]) == 0
    assert "GN monotonicity violations 0" in capsys.readouterr().out


def test_mse_accounting_and_pool_invariance(tiny_dir):
    cfg = ExperimentConfig.model_validate({**TINY, "methods": ["ts_pre", "ekf_gi", "pem_bi"]})
    params = load_checkpoint(tiny_dir / "checkpoint.bin")
    mc = run_mc(cfg, params, "ood1", 3)
    rows = {r["key"]: r for r in results_table(mc)}
    for key in ("ts_pre", "ekf_gi", "pem_bi"):
        acc = 0.0
        for run in mc.runs:
            acc += float(np.sum((run.estimates[key] - 3.0) ** 2))
        assert abs(rows[key]["mse"] - acc / 3) <= 1e-12 * max(1.0, acc)
        assert rows[key]["mse"] >= 0 and rows[key]["n_runs"] == 3
    pooled = run_mc(cfg, params, "ood1", 3, jobs=2)
    for a, b in zip(mc.runs, pooled.runs):
        for key in a.estimates:
            assert np.array_equal(a.estimates[key], b.estimates[key])
