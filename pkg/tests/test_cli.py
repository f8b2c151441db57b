import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import torch
from click.testing import CliRunner

from rgbdfill.cli import main
from rgbdfill.config import ModelConfig, RunConfig, ToySceneConfig
from rgbdfill.geometry import read_ply
from rgbdfill.models import GeneratorBundle
from rgbdfill.training import save_checkpoint


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture()
def tiny_config(tmp_path):
    config = RunConfig()
    config.scene = ToySceneConfig(width=32, height=32, n_frames=3,
                                  n_dynamic=1, n_static=2)
    config.model = ModelConfig(model_scale=0.125)
    config.train.model_scale = 0.125
    config.train.batch_size = 2
    config.train.epochs = 1
    path = tmp_path / "config.json"
    config.save(path)
    return path


@pytest.fixture()
def toy_dataset(runner, tiny_config, tmp_path):
    data = tmp_path / "data"
    result = runner.invoke(main, ["generate", "--config", str(tiny_config),
                                  "--out", str(data), "--split", "val"])
    assert result.exit_code == 0, result.output
    return data


@pytest.fixture()
def checkpoint(tmp_path):
    torch.manual_seed(0)
    bundle = GeneratorBundle(ModelConfig(model_scale=0.125))
    path = tmp_path / "model.pkl"
    save_checkpoint(path, bundle)
    return path


def tree_digest(root):
    digest = hashlib.sha256()
    for path in sorted(Path(root).rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            digest.update(path.relative_to(root).as_posix().encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def test_generate_writes_loadable_dataset(runner, tiny_config, tmp_path):
    out = tmp_path / "gen"
    result = runner.invoke(main, ["generate", "--config", str(tiny_config),
                                  "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert "3 frames" in result.output
    from rgbdfill.dataset import load_sequence
    pair = load_sequence(out, "train", "000")
    assert len(pair) == 3
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "generate"
    assert manifest["seed"] == 0


def test_generate_same_seed_identical_tree(runner, tiny_config, tmp_path):
    digests = []
    for name in ("a", "b"):
        out = tmp_path / name
        result = runner.invoke(main,
                               ["generate", "--config", str(tiny_config),
                                "--seed", "7", "--out", str(out)])
        assert result.exit_code == 0, result.output
        digests.append(tree_digest(out))
    assert digests[0] == digests[1]


def test_generate_refuses_nonempty_out(runner, tiny_config, tmp_path):
    out = tmp_path / "gen"
    out.mkdir()
    (out / "junk.txt").write_text("x")
    result = runner.invoke(main, ["generate", "--config", str(tiny_config),
                                  "--out", str(out)])
    assert result.exit_code != 0
    assert "--force" in result.output


def test_generate_zero_frames_fails(runner, tmp_path):
    config = RunConfig()
    config.scene.n_frames = 0
    path = tmp_path / "bad.json"
    config.save(path)
    result = runner.invoke(main, ["generate", "--config", str(path),
                                  "--out", str(tmp_path / "gen")])
    assert result.exit_code != 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_coarse_smoke(runner, tiny_config, toy_dataset, tmp_path,
                            monkeypatch):
    monkeypatch.setenv("DYNAFILL_CACHE", str(tmp_path / "cache"))
    out = tmp_path / "train_out"
    result = runner.invoke(main, ["train", "--config", str(tiny_config),
                                  "--stage", "coarse",
                                  "--data", str(toy_dataset),
                                  "--split", "val", "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert (out / "checkpoint.pkl").exists()
    assert (out / "log.jsonl").exists()
    assert (out / "manifest.json").exists()
    assert (tmp_path / "cache").exists()


def test_train_invalid_stage_usage_error(runner, toy_dataset, tmp_path):
    result = runner.invoke(main, ["train", "--stage", "bogus",
                                  "--data", str(toy_dataset),
                                  "--out", str(tmp_path / "x")])
    assert result.exit_code == 2


def test_train_joint_names_missing_prerequisite(runner, tiny_config,
                                                toy_dataset, tmp_path,
                                                monkeypatch):
    monkeypatch.setenv("DYNAFILL_CACHE", str(tmp_path / "cache"))
    result = runner.invoke(main, ["train", "--config", str(tiny_config),
                                  "--stage", "joint",
                                  "--data", str(toy_dataset),
                                  "--split", "val",
                                  "--out", str(tmp_path / "joint")])
    assert result.exit_code != 0
    for name in ("coarse", "refine", "depth"):
        assert name in result.output


def test_train_resume_continues_step_counter(runner, tiny_config,
                                             toy_dataset, tmp_path,
                                             monkeypatch):
    monkeypatch.setenv("DYNAFILL_CACHE", str(tmp_path / "cache"))
    first = tmp_path / "first"
    result = runner.invoke(main, ["train", "--config", str(tiny_config),
                                  "--stage", "coarse",
                                  "--data", str(toy_dataset),
                                  "--split", "val", "--out", str(first)])
    assert result.exit_code == 0, result.output
    steps_first = json.loads((first / "manifest.json").read_text())["steps"]
    second = tmp_path / "second"
    result = runner.invoke(main, ["train", "--config", str(tiny_config),
                                  "--stage", "coarse",
                                  "--data", str(toy_dataset),
                                  "--split", "val", "--out", str(second),
                                  "--resume",
                                  str(first / "checkpoint.pkl")])
    assert result.exit_code == 0, result.output
    resumed = json.loads((second / "manifest.json").read_text())
    assert resumed["steps"] > steps_first


# ---------------------------------------------------------------------------
# eval / ablate / pointcloud / visualize
# ---------------------------------------------------------------------------

def test_eval_writes_reports_and_figure(runner, toy_dataset, checkpoint,
                                        tmp_path):
    out = tmp_path / "eval_out"
    result = runner.invoke(main, ["eval", "--checkpoint", str(checkpoint),
                                  "--data", str(toy_dataset),
                                  "--split", "val", "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert (out / "metrics.csv").exists()
    assert (out / "metrics.json").exists()
    assert (out / "per_frame_l1.svg").exists()
    rows = json.loads((out / "metrics.json").read_text())
    assert rows[0]["frames"] == 3


def test_eval_missing_checkpoint(runner, toy_dataset, tmp_path):
    result = runner.invoke(main, ["eval", "--checkpoint",
                                  str(tmp_path / "nope.pkl"),
                                  "--data", str(toy_dataset),
                                  "--out", str(tmp_path / "o")])
    assert result.exit_code == 2
    assert "nope.pkl" in result.output


def test_ablate_three_row_table(runner, toy_dataset, checkpoint, tmp_path):
    out = tmp_path / "ablate_out"
    result = runner.invoke(main, ["ablate", "--checkpoint", str(checkpoint),
                                  "--data", str(toy_dataset),
                                  "--split", "val", "--which", "mask",
                                  "--grid", "0,0.5,1", "--out", str(out)])
    assert result.exit_code == 0, result.output
    csv_lines = (out / "sweep_mask.csv").read_text().splitlines()
    assert len(csv_lines) == 4  # header + 3 grid points
    assert (out / "sweep_mask.svg").exists()


def test_ablate_bad_grid(runner, toy_dataset, checkpoint, tmp_path):
    result = runner.invoke(main, ["ablate", "--checkpoint", str(checkpoint),
                                  "--data", str(toy_dataset),
                                  "--which", "mask", "--grid", "zero",
                                  "--out", str(tmp_path / "o")])
    assert result.exit_code == 2


def test_pointcloud_round_trip(runner, toy_dataset, tmp_path):
    out = tmp_path / "cloud.ply"
    result = runner.invoke(main, ["pointcloud", "--data", str(toy_dataset),
                                  "--split", "val", "--stride", "4",
                                  "--out", str(out)])
    assert result.exit_code == 0, result.output
    points, colors = read_ply(out)
    assert len(points) > 0
    assert colors.dtype == np.uint8
    text = out.read_text()
    assert text.startswith("ply\nformat ascii 1.0")


def test_visualize_panels(runner, toy_dataset, checkpoint, tmp_path):
    out = tmp_path / "viz"
    result = runner.invoke(main, ["visualize", "--checkpoint",
                                  str(checkpoint),
                                  "--data", str(toy_dataset),
                                  "--split", "val", "--frames", "2",
                                  "--out", str(out)])
    assert result.exit_code == 0, result.output
    panels = sorted(out.glob("panel_*.png"))
    assert len(panels) == 2
    assert all(p.stat().st_size > 0 for p in panels)


def test_device_validation(runner, toy_dataset, checkpoint, tmp_path):
    if torch.cuda.is_available():
        pytest.skip("cuda present; rejection path not reachable")
    result = runner.invoke(main, ["eval", "--checkpoint", str(checkpoint),
                                  "--data", str(toy_dataset),
                                  "--device", "cuda",
                                  "--out", str(tmp_path / "o")])
    assert result.exit_code != 0
    assert "cuda" in result.output
