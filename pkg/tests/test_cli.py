"""Command-line interface: gen / train / eval / predict."""

import json

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from affkit.cli import main
from affkit.synthgen import load_scenes
from affkit.training import load_history

RUNNER = CliRunner()

GEN_ARGS = ["gen", "--variant", "noiseless", "--tasks", "open,close",
            "--seed", "0", "--n-train", "6", "--n-test", "2"]

TINY_MODEL_YAML = {"d": 8, "patch_size": 4, "n_layers": 1, "n_heads": 2,
                   "d_ff": 16, "film_hidden": 8, "gate_hidden": 8}
TINY_TRAIN_YAML = {"k": 2, "candidate_pool_size": 10, "episodes_per_query": 2,
                   "batch_size": 8, "max_epochs": 2, "seed": 0}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    result = RUNNER.invoke(main, GEN_ARGS + ["--out", str(out)])
    assert result.exit_code == 0, result.output
    return out


def _write_config(path, data_dir, **train_overrides):
    train = dict(TINY_TRAIN_YAML, **train_overrides)
    path.write_text(yaml.safe_dump({"data": str(data_dir),
                                    "model": TINY_MODEL_YAML,
                                    "train": train}))
    return str(path)


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("ckpt")
    cfg = _write_config(out / "run.yaml", data_dir)
    ck = out / "model.ckpt"
    result = RUNNER.invoke(main, ["train", "--config", cfg,
                                  "--out-checkpoint", str(ck), "--quiet"])
    assert result.exit_code == 0, result.output
    return ck


# ---------------------------------------------------------------------------
# gen


def test_gen_manifest_and_files(data_dir):
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert manifest["n_train_per_task"] == 6
    assert manifest["n_test_per_task"] == 2
    assert manifest["tasks"] == ["open", "close"]
    assert len(manifest["train_ids"]) == 12
    assert len(manifest["test_ids"]) == 4
    assert not set(manifest["train_ids"]) & set(manifest["test_ids"])
    for name in ("train.jsonl", "test.jsonl", "memory.jsonl"):
        assert (data_dir / name).exists()
    train, _ = load_scenes(data_dir / "train.jsonl")
    assert [s.scene_id for s in train] == manifest["train_ids"]


def test_gen_same_seed_byte_identical(tmp_path, data_dir):
    result = RUNNER.invoke(main, GEN_ARGS + ["--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    for name in ("train.jsonl", "test.jsonl", "memory.jsonl", "manifest.json"):
        assert (tmp_path / name).read_bytes() == (data_dir / name).read_bytes()


def test_gen_rejects_unknown_variant(tmp_path):
    result = RUNNER.invoke(main, ["gen", "--variant", "pristine",
                                  "--out", str(tmp_path)])
    assert result.exit_code == 2


def test_gen_rejects_bad_counts(tmp_path):
    result = RUNNER.invoke(main, ["gen", "--variant", "noiseless",
                                  "--n-train", "0", "--out", str(tmp_path)])
    assert result.exit_code == 2


# ---------------------------------------------------------------------------
# train


def test_train_writes_checkpoint_and_history(checkpoint):
    assert checkpoint.exists()
    history = load_history(str(checkpoint) + ".history.csv")
    assert 1 <= len(history) <= TINY_TRAIN_YAML["max_epochs"]
    assert all(np.isfinite(history))


def test_train_missing_memory_exits_2(tmp_path, data_dir):
    broken = tmp_path / "broken"
    broken.mkdir()
    for name in ("manifest.json", "train.jsonl", "test.jsonl"):
        (broken / name).write_bytes((data_dir / name).read_bytes())
    cfg = _write_config(tmp_path / "run.yaml", broken)
    result = RUNNER.invoke(main, ["train", "--config", cfg,
                                  "--out-checkpoint",
                                  str(tmp_path / "m.ckpt"), "--quiet"])
    assert result.exit_code == 2


def test_train_unknown_config_key_exits_2(tmp_path, data_dir):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump({"data": str(data_dir),
                                   "train": {"learning_rate": 0.1}}))
    result = RUNNER.invoke(main, ["train", "--config", str(cfg),
                                  "--out-checkpoint",
                                  str(tmp_path / "m.ckpt"), "--quiet"])
    assert result.exit_code == 2
    assert "learning_rate" in result.output


def test_train_unknown_top_level_key_exits_2(tmp_path, data_dir):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump({"data": str(data_dir), "optimizer": "sgd"}))
    result = RUNNER.invoke(main, ["train", "--config", str(cfg),
                                  "--out-checkpoint",
                                  str(tmp_path / "m.ckpt"), "--quiet"])
    assert result.exit_code == 2


def test_train_flag_overrides_win(tmp_path, data_dir):
    cfg = _write_config(tmp_path / "run.yaml", data_dir, max_epochs=50)
    ck = tmp_path / "m.ckpt"
    result = RUNNER.invoke(main, ["train", "--config", cfg,
                                  "--out-checkpoint", str(ck),
                                  "--max-epochs", "1", "--quiet"])
    assert result.exit_code == 0, result.output
    assert len(load_history(str(ck) + ".history.csv")) == 1


# ---------------------------------------------------------------------------
# eval


def test_eval_single_checkpoint(data_dir, checkpoint, tmp_path):
    out = tmp_path / "report.json"
    result = RUNNER.invoke(main, ["eval", "--data", str(data_dir),
                                  "--checkpoint", str(checkpoint),
                                  "--k", "2", "--out", str(out)])
    assert result.exit_code == 0, result.output
    payload = json.loads(out.read_text())
    assert payload["metadata"]["variant_rule"] == "full"
    assert payload["metadata"]["k"] == 2
    assert 0.0 <= payload["overall"] <= 180.0
    assert f"{payload['overall']:.3f}" in result.output


def test_eval_aggregate_is_mean_of_seeds(data_dir, checkpoint, tmp_path):
    out = tmp_path / "report.json"
    result = RUNNER.invoke(main, ["eval", "--data", str(data_dir),
                                  "--checkpoint", str(checkpoint),
                                  "--checkpoint", str(checkpoint),
                                  "--k", "1", "--seeds", "a,b",
                                  "--out", str(out)])
    assert result.exit_code == 0, result.output
    agg = json.loads((tmp_path / "report.json.aggregate.json").read_text())
    per_seed = agg["per_seed"]
    assert set(per_seed) == {"a", "b"}
    assert agg["aggregate"] == pytest.approx(
        np.mean(list(per_seed.values())), abs=1e-12)
    # Same checkpoint twice: both seeds score identically.
    assert per_seed["a"] == per_seed["b"]


def test_eval_k_sweep_rows(data_dir, checkpoint, tmp_path):
    out = tmp_path / "sweep.tsv"
    args = ["eval", "--data", str(data_dir), "--k-sweep", "0..4",
            "--out", str(out)]
    for _ in range(5):
        args += ["--checkpoint", str(checkpoint)]
    result = RUNNER.invoke(main, args)
    assert result.exit_code == 0, result.output
    lines = out.read_text().splitlines()
    assert lines[0] == "k\tmae_deg"
    assert [int(l.split("\t")[0]) for l in lines[1:]] == [0, 1, 2, 3, 4]


def test_eval_k_sweep_checkpoint_count_mismatch(data_dir, checkpoint):
    result = RUNNER.invoke(main, ["eval", "--data", str(data_dir),
                                  "--k-sweep", "0..4",
                                  "--checkpoint", str(checkpoint)])
    assert result.exit_code == 2


# ---------------------------------------------------------------------------
# predict


def test_predict_contact_exact_on_noiseless(data_dir, checkpoint):
    scenes, _ = load_scenes(data_dir / "test.jsonl")
    result = RUNNER.invoke(main, ["predict", "--checkpoint", str(checkpoint),
                                  "--scene", str(data_dir / "test.jsonl"),
                                  "--index", "0",
                                  "--memory", str(data_dir / "memory.jsonl"),
                                  "--k", "2"])
    assert result.exit_code == 0, result.output
    payload = json.loads(result.output.splitlines()[0])
    assert payload["scene_id"] == scenes[0].scene_id
    assert tuple(payload["contact_px"]) == scenes[0].contact
    assert not payload["degenerate"]
    assert np.linalg.norm(payload["direction"]) == pytest.approx(1.0, abs=1e-9)


def test_predict_lift_on_flat_depth(data_dir, checkpoint):
    result = RUNNER.invoke(main, ["predict", "--checkpoint", str(checkpoint),
                                  "--scene", str(data_dir / "test.jsonl"),
                                  "--memory", str(data_dir / "memory.jsonl"),
                                  "--k", "2", "--lift"])
    assert result.exit_code == 0, result.output
    payload = json.loads(result.output.splitlines()[0])
    # Depth is a fronto-parallel plane, so the lifted direction stays in it.
    assert payload["direction_3d"][2] == pytest.approx(0.0, abs=1e-9)
    assert payload["contact_3d"][2] == pytest.approx(1.0, abs=1e-9)
    assert np.linalg.norm(payload["direction_3d"]) == pytest.approx(
        1.0, abs=1e-9)


def test_predict_k0_still_runs(data_dir, checkpoint):
    result = RUNNER.invoke(main, ["predict", "--checkpoint", str(checkpoint),
                                  "--scene", str(data_dir / "test.jsonl"),
                                  "--memory", str(data_dir / "memory.jsonl"),
                                  "--k", "0"])
    assert result.exit_code == 0, result.output
    payload = json.loads(result.output.splitlines()[0])
    assert payload["direction_raw"] is not None


def test_predict_index_out_of_range(data_dir, checkpoint):
    result = RUNNER.invoke(main, ["predict", "--checkpoint", str(checkpoint),
                                  "--scene", str(data_dir / "test.jsonl"),
                                  "--index", "99",
                                  "--memory", str(data_dir / "memory.jsonl")])
    assert result.exit_code == 2
