import numpy as np
import pytest

from slotplan.checkpoint import load_checkpoint, save_checkpoint
from slotplan.cli import main
from slotplan.envs import rollout_random
from slotplan.config import EnvConfig
from slotplan.metrics import read_metrics

TINY_CONFIG = """
env:
  grid_size: 4
  n_objects: 3
model:
  slot_dim: 8
  hidden: 8
planner:
  num_simulations: 6
  num_candidates: 5
  depth_cap: 3
trainer:
  batch_size: 8
  min_replay: 30
  total_env_steps: 90
  eval_interval: 45
  eval_episodes: 2
  train_per_env_step: 0.25
  warmup_iters: 5
  buffer_capacity: 500
  stale_window: 50
  unroll_len: 2
  td_horizon: 2
seed: 5
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(TINY_CONFIG)
    return path


def test_train_writes_outputs(tiny_config, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny_config), "--out", str(out)]) == 0
    assert (out / "metrics.csv").exists()
    assert (out / "checkpoint_final.ckpt").exists()
    assert (out / "config_resolved.yaml").exists()
    text = capsys.readouterr().out
    assert "training finished" in text
    rows = read_metrics(out / "metrics.csv")
    assert any(r["kind"] == "train" for r in rows)
    assert any(r["kind"] == "eval" for r in rows)


def test_train_does_not_mutate_config(tiny_config, tmp_path):
    before = tiny_config.read_text()
    main(["train", "--config", str(tiny_config), "--out", str(tmp_path / "r")])
    assert tiny_config.read_text() == before


def test_same_seed_metrics_identical_after_header(tiny_config, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--config", str(tiny_config), "--out", str(out)]) == 0
        outs.append((out / "metrics.csv").read_text().splitlines())
    assert outs[0][1:] == outs[1][1:]  # everything below the created-at header line


def test_out_root_env_var(tiny_config, tmp_path, monkeypatch):
    monkeypatch.setenv("SLOTPLAN_OUT_ROOT", str(tmp_path / "root"))
    assert main(["train", "--config", str(tiny_config), "--out", "nested/run"]) == 0
    assert (tmp_path / "root" / "nested" / "run" / "metrics.csv").exists()


def test_eval_zero_training_checkpoint_matches_random_baseline(tmp_path, capsys):
    config = tmp_path / "cfg.yaml"
    config.write_text(TINY_CONFIG.replace("total_env_steps: 90", "total_env_steps: 0"))
    out = tmp_path / "run"
    assert main(["train", "--config", config.as_posix(), "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "checkpoint_final.ckpt"),
                 "--episodes", "150", "--seed", "1"]) == 0
    text = capsys.readouterr().out
    rate = float([l for l in text.splitlines() if l.startswith("success rate")][0].split(":")[1])
    baseline, _ = rollout_random(EnvConfig(variant="discrete", grid_size=4, n_objects=3,
                                           horizon=50), 2000, seed=7)
    assert abs(rate - baseline) < 0.15  # statistically equal: uniform search at init


def test_eval_missing_checkpoint_is_usage_error(capsys):
    assert main(["eval", "--checkpoint", "/nope.ckpt", "--episodes", "2"]) == 1
    assert "checkpoint" in capsys.readouterr().err


def test_eval_nan_checkpoint_exits_numeric_fault(tmp_path, tiny_config, capsys):
    out = tmp_path / "run"
    config = tmp_path / "cfg0.yaml"
    config.write_text(TINY_CONFIG.replace("total_env_steps: 90", "total_env_steps: 0"))
    main(["train", "--config", str(config), "--out", str(out)])
    payload = load_checkpoint(out / "checkpoint_final.ckpt")
    payload["params"]["node_dyn.w0"][0, 0] = np.nan
    poisoned = out / "poisoned.ckpt"
    save_checkpoint(payload, poisoned)
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(poisoned), "--episodes", "1"]) == 3
    assert "numeric fault" in capsys.readouterr().err


def test_usage_errors_exit_one(capsys):
    assert main(["train"]) == 1  # missing --config
    assert main(["frobnicate"]) == 1
    assert main(["plot", "--metrics", "/missing.csv", "--out", "x.svg"]) == 1


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0


def test_verify_fast_passes(capsys):
    assert main(["verify", "--fast"]) == 0
    text = capsys.readouterr().out
    assert "[PASS]" in text and "[FAIL]" not in text
    assert "all checks passed" in text


def test_plot_two_rows_and_idempotent(tmp_path, capsys):
    metrics = tmp_path / "m.csv"
    metrics.write_text(
        "# slotplan metrics v1 created 2026-01-01T00:00:00\n"
        "kind,train_iter,env_steps,loss,loss_reward,loss_policy,loss_value,loss_consistency,"
        "grad_norm,branch_td,branch_sve,fault,success_rate,mean_return,std_return\n"
        "eval,0,100,,,,,,,,,,0.5,0.5,0.1\n"
        "eval,0,200,,,,,,,,,,0.75,0.75,0.05\n"
    )
    out = tmp_path / "curve.svg"
    assert main(["plot", "--metrics", str(metrics), "--out", str(out)]) == 0
    svg = out.read_text()
    assert svg.startswith("<svg")
    assert svg.count("<circle") == 4  # two series, two points each
    assert "</svg>" in svg
    first = out.read_bytes()
    assert main(["plot", "--metrics", str(metrics), "--out", str(out)]) == 0
    assert out.read_bytes() == first
    text = capsys.readouterr().out
    assert "final success rate" in text


def test_resume_config_mismatch_rejected(tiny_config, tmp_path, capsys):
    out = tmp_path / "run"
    main(["train", "--config", str(tiny_config), "--out", str(out)])
    other = tmp_path / "other.yaml"
    other.write_text(TINY_CONFIG.replace("gamma: 0.97", "").replace("batch_size: 8", "batch_size: 4"))
    code = main(["train", "--config", str(other), "--out", str(tmp_path / "r2"),
                 "--resume", str(out / "checkpoint_final.ckpt")])
    assert code == 1
    assert "mismatch" in capsys.readouterr().err
