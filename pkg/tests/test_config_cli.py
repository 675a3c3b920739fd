import json

import pytest
import yaml
from hypothesis import given, settings, strategies as st

from pointerpatch.cli import main
from pointerpatch.config import (ConfigError, ExperimentConfig, apply_axis, dump_config, load_config,
                                 parse_config)
from pointerpatch.runner import emit_report

SMALL = """
seed: 0
model: {num_layers: 1, num_heads: 2, num_points: 2, num_levels: 1, channel_dim: 8, num_queries: 3,
        num_classes: 3, ffn_dim: 16, backbone_width: 8}
train: {epochs: 1, batch_size: 4, log_every: 0}
attack: {strategy: SP, max_iterations: 2, batch_size: 2, stop_on_zero_robust_metric: false}
plan: {num_targets: 1, patch_edge: 6}
data: {detector_train_count: 4, detector_eval_count: 2, attack_train_count: 4, attack_eval_count: 2}
"""


@pytest.fixture
def small_yaml(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(SMALL)
    return p


def test_defaults_round_trip():
    cfg = ExperimentConfig()
    assert parse_config(dump_config(cfg)) == cfg
    assert cfg.attack.learning_rate == 0.22 and cfg.attack.max_iterations == 100
    assert cfg.data.attack_train_count == 360 and cfg.data.attack_eval_count == 40


@given(st.sampled_from(["IP", "OP", "SP", "CP", "ATT"]), st.integers(1, 12), st.integers(0, 99),
       st.sampled_from(["uniform", "random"]), st.booleans())
@settings(max_examples=40, deadline=None)
def test_round_trip_is_identity(strategy, edge, seed, placement, mv):
    cfg = parse_config(SMALL)
    cfg.attack.strategy = strategy
    cfg.plan.patch_edge = edge
    cfg.plan.placement = placement
    cfg.seed = seed
    cfg.multiview = mv
    once = parse_config(dump_config(cfg))
    assert once == cfg
    assert dump_config(once) == dump_config(cfg)


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("atack: {}")
    with pytest.raises(ConfigError, match=r"plan: unknown key\(s\) \['edge'\]"):
        parse_config("plan: {edge: 3}")
    with pytest.raises(ConfigError):
        parse_config("model: {channel_dim: 10, num_heads: 4}")
    bad = tmp_path / "bad.yaml"
    bad.write_text("plan: [1, 2")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_cross_field_validation():
    cfg = parse_config(SMALL)
    cfg.plan.num_targets = 3                 # R = 2
    with pytest.raises(ConfigError, match="exceed"):
        cfg.validate()
    cfg.attack.strategy = "ATT"
    cfg.validate()
    cfg = parse_config(SMALL)
    cfg.model.image_size = (32, 32)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_sweep_axis_rules():
    cfg = parse_config(SMALL)
    with pytest.raises(ConfigError, match="source_count"):
        apply_axis(cfg, "source_count", 2)
    with pytest.raises(ConfigError, match="multiview"):
        apply_axis(cfg, "num_cameras", 2)
    cfg.attack.strategy = "CP"
    pt = apply_axis(cfg, "patch_count", 2)
    assert (pt.plan.num_sources, pt.plan.num_targets) == (2, 2)
    cfg.command = "sweep"
    cfg.sweep = parse_config("sweep: {axis: target_count, values: [1, 3]}").sweep
    with pytest.raises(ConfigError):
        cfg.validate()                       # 3 targets exceed R = 2
    with pytest.raises(ConfigError):
        parse_config("sweep: {axis: colour, values: [1]}")


def test_cli_exit_codes(tmp_path, small_yaml, capsys):
    assert main(["attack", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path / "a")]) == 2
    assert main(["frobnicate"]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("attack: {strategy: SP}\nplan: {num_targets: 9}\n")
    assert main(["attack", "--config", str(bad), "--out", str(tmp_path / "b")]) == 2
    assert not (tmp_path / "b").exists()     # rejected before any output
    assert main(["eval", "--config", str(small_yaml), "--out", str(tmp_path / "c")]) == 2   # no checkpoint
    broken = tmp_path / "broken.npz"
    broken.write_bytes(b"not a checkpoint")
    assert main(["eval", "--config", str(small_yaml), "--checkpoint", str(broken),
                 "--out", str(tmp_path / "d")]) == 1


def test_cli_train_attack_eval_report(tmp_path, small_yaml, monkeypatch):
    monkeypatch.setenv("POINTERPATCH_OUT", str(tmp_path / "root"))
    assert main(["train", "--config", str(small_yaml)]) == 0
    ckpt = tmp_path / "root" / "train" / "model.npz"
    assert ckpt.exists() and (tmp_path / "root" / "train" / "config.yaml").exists()

    run = tmp_path / "sp"
    assert main(["attack", "--config", str(small_yaml), "--checkpoint", str(ckpt), "--out", str(run)]) == 0
    for name in ("history.csv", "metrics.json", "frames.npz", "curves.png", "patches/target_0.png"):
        assert (run / name).exists()
    # the embedded snapshot reproduces the run config
    assert load_config(run / "config.yaml").attack.strategy == "SP"
    # refuses to overwrite without --force
    assert main(["attack", "--config", str(small_yaml), "--checkpoint", str(ckpt), "--out", str(run)]) == 2
    assert main(["attack", "--config", str(small_yaml), "--checkpoint", str(ckpt), "--out", str(run),
                 "--force"]) == 0

    ev = tmp_path / "eval.yaml"
    ev.write_text(SMALL + f"patches_from: {run}\n")
    assert main(["eval", "--config", str(ev), "--checkpoint", str(ckpt), "--out", str(tmp_path / "ev")]) == 0
    assert json.loads((tmp_path / "ev" / "metrics.json").read_text())["patched"] is True
    assert main(["heatmap", "--config", str(small_yaml), "--checkpoint", str(ckpt),
                 "--out", str(tmp_path / "hm")]) == 0
    assert (tmp_path / "hm" / "frame0_pointer.png").exists()

    empty = tmp_path / "empty"
    empty.mkdir()
    rows = emit_report([run, empty], tmp_path / "rep")
    assert [r["status"] for r in rows] == ["complete", "incomplete"]
    assert rows[0]["iterations"] == 2
    assert (tmp_path / "rep" / "report.csv").exists() and (tmp_path / "rep" / "report.md").exists()
    assert main(["report", str(run), "--out", str(tmp_path / "rep2")]) == 0


def test_cli_small_sweep(tmp_path, small_yaml):
    cfg = yaml.safe_load(SMALL)
    cfg["sweep"] = {"axis": "patch_size", "values": [4, 8]}
    p = tmp_path / "sweep.yaml"
    p.write_text(yaml.safe_dump(cfg))
    out = tmp_path / "sw"
    assert main(["sweep", "--config", str(p), "--out", str(out)]) == 0
    assert (out / "patch_size_4" / "metrics.json").exists() and (out / "patch_size_8" / "metrics.json").exists()
    assert (out / "report.csv").exists() and (out / "sweep_patch_size.png").exists()
