"""Command-line entry points tying the library into reproducible runs.

Every command writes a manifest.json next to its artifacts recording the
command name, seed, config hash and output paths, so a run can be redone
from the manifest alone. The DYNAFILL_CACHE environment variable selects
where the frozen perceptual-backbone weights are cached.
"""

import datetime
import json
import os
from pathlib import Path

import click
import numpy as np
import torch

from . import dataset as ds
from .config import ModelConfig, RunConfig, TrainConfig
from .evaluation import (export_gating_visualization, noise_sweep,
                         sequence_report, write_sweep_report)
from .geometry import aggregate_pointcloud, write_ply
from .losses import RandomPyramidBackbone
from .pipeline import InpaintingPipeline, load_bundle, run_stream
from .training import Trainer, apply_checkpoint, load_checkpoint

CACHE_ENV = "DYNAFILL_CACHE"


def cache_dir():
    override = os.environ.get(CACHE_ENV)
    if override:
        return Path(override)
    return Path.home() / ".cache" / "rgbdfill"


def ensure_backbone(seed=0):
    """Load the perceptual backbone from the cache, creating it once.

    Caching the random-init weights pins the perceptual and style losses
    to fixed features even if upstream initialization schemes change.
    """
    backbone = RandomPyramidBackbone(seed=seed)
    path = cache_dir() / f"backbone-{seed}.pt"
    if path.exists():
        backbone.load_state_dict(torch.load(path, weights_only=True))
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(backbone.state_dict(), path)
    return backbone


def _prepare_out(out, force):
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise click.ClickException(
            f"output directory {out} is not empty; pass --force to reuse")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out, command, config, seed, artifacts):
    path = Path(out) / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest.update({
        "command": command,
        "seed": seed,
        "schema_version": config.schema_version,
        "config_hash": config.config_hash(),
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "artifacts": sorted(str(a) for a in artifacts),
    })
    path.write_text(json.dumps(manifest, indent=2))
    return path


def _load_config(config_path):
    if config_path:
        return RunConfig.load(config_path)
    return RunConfig()


def _load_split(data_dir, split):
    data_dir = Path(data_dir)
    try:
        seq_ids = ds.list_sequences(data_dir, split)
        if not seq_ids:
            raise click.ClickException(
                f"no sequences under {data_dir}/{split}")
        return [ds.load_sequence(data_dir, split, sid) for sid in seq_ids]
    except ds.DatasetError as exc:
        raise click.ClickException(str(exc))


def _check_device(device):
    if device == "cpu":
        return
    if device.startswith("cuda") and not torch.cuda.is_available():
        raise click.ClickException(f"device {device} is not available")


@click.group()
def main():
    """Geometry-aware recurrent RGB-D video inpainting toolkit."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--force", is_flag=True)
@click.option("--split", default="train", show_default=True)
@click.option("--sequences", default=1, show_default=True)
def generate(config_path, seed, out, force, split, sequences):
    """Render procedural toy sequences in the dataset layout."""
    config = _load_config(config_path)
    try:
        config.scene.validate()
    except ValueError as exc:
        raise click.ClickException(str(exc))
    out = _prepare_out(out, force)
    artifacts = []
    total = 0
    for i in range(sequences):
        pair = ds.generate_toy_sequence(config.scene, seed=seed + i)
        seq_id = f"{i:03d}"
        ds.save_sequence(pair, out, split, seq_id)
        artifacts.append(out / split / seq_id)
        total += len(pair)
        click.echo(f"{split}/{seq_id}: {len(pair)} frames")
    artifacts.append(_write_manifest(out, "generate", config, seed,
                                     artifacts))
    click.echo(f"wrote {total} frames across {sequences} sequence(s)")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--stage",
              type=click.Choice(TrainConfig.STAGES), default=None)
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True))
@click.option("--split", default="train", show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--force", is_flag=True)
@click.option("--seed", default=None, type=int)
@click.option("--model-scale", default=None, type=float)
@click.option("--device", default="cpu", show_default=True)
@click.option("--init", "inits", multiple=True,
              help="subnet=checkpoint pairs for stage initialization")
@click.option("--resume", type=click.Path(exists=True),
              help="continue from a saved checkpoint")
def train(config_path, stage, data_dir, split, out, force, seed,
          model_scale, device, inits, resume):
    """Run one training stage and save the best checkpoint."""
    _check_device(device)
    config = _load_config(config_path)
    if stage:
        config.train.stage = stage
    if seed is not None:
        config.train.seed = seed
    if model_scale is not None:
        config.train.model_scale = model_scale
        config.model.model_scale = model_scale
    out = _prepare_out(out, force)

    init_checkpoints = {}
    for item in inits:
        if "=" not in item:
            raise click.UsageError("--init expects subnet=checkpoint")
        name, path = item.split("=", 1)
        if not Path(path).exists():
            raise click.ClickException(f"missing checkpoint: {path}")
        init_checkpoints[name] = path

    sequences = _load_split(data_dir, split)
    trainer = Trainer(config.train, model_config=config.model,
                      loss_weights=config.weights)
    trainer.backbone = ensure_backbone(seed=0)
    if resume:
        blob = load_checkpoint(resume)
        apply_checkpoint(trainer.bundle, blob, disc=trainer.disc)
        trainer.g_steps = int(blob["meta"].get("steps", 0))
    try:
        history = trainer.fit(sequences, out,
                              init_checkpoints=init_checkpoints)
    except Exception as exc:
        raise click.ClickException(str(exc))
    artifacts = [out / "checkpoint.pkl", out / "log.jsonl"]
    artifacts.append(_write_manifest(out, "train", config,
                                     config.train.seed, artifacts))
    click.echo(f"stage {config.train.stage}: {len(history)} epoch(s), "
               f"{trainer.g_steps} generator steps")


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True))
@click.option("--split", default="val", show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--force", is_flag=True)
@click.option("--device", default="cpu", show_default=True)
def evaluate(checkpoint, data_dir, split, out, force, device):
    """Score a checkpoint against ground truth and write report files."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    _check_device(device)
    out = _prepare_out(out, force)
    bundle = load_bundle(checkpoint)
    sequences = _load_split(data_dir, split)

    from .evaluation import l1_distance
    rows = []
    per_frame_l1 = []
    for seq_index, pair in enumerate(sequences):
        out_pair, timings = run_stream(pair, bundle)
        report = sequence_report(out_pair.static_frames,
                                 pair.static_frames,
                                 [f.mask for f in pair.dynamic_frames])
        row = {"sequence": seq_index, "mean_ms": float(np.mean(timings))}
        row.update(report.to_dict())
        rows.append(row)
        per_frame_l1.extend(
            l1_distance(p.rgb, g.rgb) for p, g in
            zip(out_pair.static_frames, pair.static_frames))

    import csv as csv_mod
    csv_path = out / "metrics.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv_mod.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    json_path = out / "metrics.json"
    json_path.write_text(json.dumps(rows, indent=2))

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(per_frame_l1, marker=".")
    ax.set_xlabel("frame")
    ax.set_ylabel("full-image L1 [levels]")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    svg_path = out / "per_frame_l1.svg"
    fig.savefig(svg_path, format="svg")
    plt.close(fig)

    config = _load_config(None)
    artifacts = [csv_path, json_path, svg_path]
    artifacts.append(_write_manifest(out, "eval", config, 0, artifacts))
    click.echo(f"evaluated {len(sequences)} sequence(s); "
               f"full L1 {rows[0]['full_l1']:.4f}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True))
@click.option("--split", default="val", show_default=True)
@click.option("--which", type=click.Choice(["mask", "depth", "odometry"]),
              required=True)
@click.option("--grid", default="0,0.5,1", show_default=True,
              help="comma-separated p_n values")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--force", is_flag=True)
def ablate(checkpoint, data_dir, split, which, grid, seed, out, force):
    """Sweep one noise source over a p_n grid and plot the degradation."""
    out = _prepare_out(out, force)
    try:
        values = [float(v) for v in grid.split(",") if v.strip()]
    except ValueError:
        raise click.UsageError(f"bad grid: {grid}")
    if not values:
        raise click.UsageError("empty p_n grid")
    bundle = load_bundle(checkpoint)
    sequences = _load_split(data_dir, split)
    config = _load_config(None)
    rows = noise_sweep(bundle, sequences[0], values, which, seed=seed,
                       config=config.noise)
    paths = write_sweep_report(rows, out, stem=f"sweep_{which}")
    artifacts = list(paths.values())
    artifacts.append(_write_manifest(out, "ablate", config, seed,
                                     artifacts))
    for row in rows:
        click.echo(f"p_n={row['p_n']:.2f}  full L1={row['full_l1']:.4f}")


@main.command()
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True))
@click.option("--split", default="output", show_default=True)
@click.option("--seq", "seq_id", default=None)
@click.option("--stride", default=4, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--force", is_flag=True)
def pointcloud(data_dir, split, seq_id, stride, out, force):
    """Aggregate a posed sequence into a colored PLY point cloud."""
    out = Path(out)
    if out.exists() and not force:
        raise click.ClickException(f"{out} exists; pass --force")
    pair = ds.load_sequence(data_dir, split, seq_id)
    frames = [(f.rgb, f.depth, f.pose) for f in pair.static_frames]
    points, colors = aggregate_pointcloud(frames, pair.camera,
                                          stride=stride)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ply(out, points, colors)
    config = _load_config(None)
    _write_manifest(out.parent, "pointcloud", config, 0, [out])
    click.echo(f"wrote {len(points)} points to {out}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True))
@click.option("--split", default="val", show_default=True)
@click.option("--seq", "seq_id", default=None)
@click.option("--frames", "n_frames", default=4, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--force", is_flag=True)
def visualize(checkpoint, data_dir, split, seq_id, n_frames, out, force):
    """Export per-frame gating-mask inspection panels."""
    out = _prepare_out(out, force)
    bundle = load_bundle(checkpoint)
    pair = ds.load_sequence(data_dir, split, seq_id)
    pipeline = InpaintingPipeline(bundle, pair.camera)
    state = pipeline.reset()
    artifacts = []
    for frame in pair.dynamic_frames[:n_frames]:
        result = pipeline.step(frame, state)
        state = result.state
        path = out / f"panel_{frame.timestamp_index:06d}.png"
        export_gating_visualization(frame, result, path)
        artifacts.append(path)
    config = _load_config(None)
    artifacts.append(_write_manifest(out, "visualize", config, 0,
                                     artifacts))
    click.echo(f"wrote {len(artifacts) - 1} panel(s) to {out}")


if __name__ == "__main__":
    main()
