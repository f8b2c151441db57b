"""Stagewise training with loss-aware scheduled teacher forcing.

Stages run in the order depth, coarse, refine, joint; the joint stage
refuses to start unless checkpoints for all three sub-networks are
provided. Recurrence during training consumes exactly the previous frame:
with probability p the warped input comes from the ground-truth previous
frame (teacher forcing), otherwise from the model's own single-frame
output. p follows the recent refinement loss: 1 while the windowed mean
sits above `d_start`, 0 below `d_end`, linear in between.
"""

import collections
import copy
import dataclasses
import json
import pickle
from pathlib import Path

import numpy as np
import torch

from .config import LossWeights, ModelConfig, TrainConfig
from .geometry import relative_transform, warp_forward
from .losses import (RandomPyramidBackbone, gan_d_loss, gan_g_loss,
                     masked_l1, perceptual_loss, smoothness_loss, style_loss,
                     total_loss)
from .models import GeneratorBundle, PatchDiscriminator

CHECKPOINT_FORMAT = 1


class TrainingError(RuntimeError):
    pass


def teacher_forcing_prob(mean_loss, d_start, d_end):
    """Piecewise-linear schedule on the windowed refinement loss."""
    if d_start <= d_end:
        raise TrainingError("d_start must exceed d_end")
    if mean_loss >= d_start:
        return 1.0
    if mean_loss <= d_end:
        return 0.0
    return (mean_loss - d_end) / (d_start - d_end)


class TeacherForcingState:
    """Sliding window of recent refinement losses driving the schedule."""

    def __init__(self, window=20, d_start=0.06, d_end=0.01):
        self.losses = collections.deque(maxlen=window)
        self.d_start = d_start
        self.d_end = d_end

    def update(self, loss):
        self.losses.append(float(loss))

    def probability(self):
        if not self.losses:
            return 1.0
        mean = sum(self.losses) / len(self.losses)
        return teacher_forcing_prob(mean, self.d_start, self.d_end)


def rgb_to_tensor(rgb):
    """uint8 HxWx3 to float CxHxW in [-1, 1]."""
    arr = np.asarray(rgb, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr).permute(2, 0, 1)


def tensor_to_rgb(t):
    """float CxHxW in [-1, 1] back to uint8 HxWx3."""
    arr = ((t.detach().clamp(-1, 1) + 1) * 127.5).round()
    return arr.permute(1, 2, 0).cpu().numpy().astype(np.uint8)


def sequence_samples(pair):
    """Flatten a sequence into per-frame samples with t-1 references."""
    samples = []
    for t in range(len(pair)):
        samples.append({
            "dyn": pair.dynamic_frames[t],
            "sta": pair.static_frames[t],
            "prev_dyn": pair.dynamic_frames[t - 1] if t > 0 else None,
            "prev_sta": pair.static_frames[t - 1] if t > 0 else None,
            "camera": pair.camera,
        })
    return samples


def save_checkpoint(path, bundle, disc=None, meta=None):
    """Pickle every parameter as a numpy array; byte-stable across loads."""
    def pack(module):
        return {k: v.detach().cpu().numpy()
                for k, v in module.state_dict().items()}

    blob = {
        "format": CHECKPOINT_FORMAT,
        "model_config": dataclasses.asdict(bundle.config),
        "generator": pack(bundle),
        "discriminator": pack(disc) if disc is not None else None,
        "meta": meta or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(pickle.dumps(blob, protocol=4))


def load_checkpoint(path):
    blob = pickle.loads(Path(path).read_bytes())
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise TrainingError(f"unsupported checkpoint format in {path}")
    return blob


def _load_state(module, packed):
    module.load_state_dict(
        {k: torch.from_numpy(np.array(v)) for k, v in packed.items()})


def apply_checkpoint(bundle, blob, disc=None, subnet=None):
    """Restore weights; `subnet` limits the copy to one generator part."""
    packed = blob["generator"]
    if subnet is not None:
        prefix = subnet + "."
        packed = {k[len(prefix):]: v for k, v in packed.items()
                  if k.startswith(prefix)}
        if not packed:
            raise TrainingError(f"checkpoint has no '{subnet}' weights")
        _load_state(getattr(bundle, subnet), packed)
    else:
        _load_state(bundle, packed)
    if disc is not None and blob.get("discriminator") is not None:
        _load_state(disc, blob["discriminator"])


class Trainer:
    """Optimizes one training stage over paired dynamic/static sequences."""

    def __init__(self, config=None, model_config=None, loss_weights=None,
                 backbone_seed=0):
        self.config = config or TrainConfig()
        self.config.validate()
        self.model_config = model_config or ModelConfig(
            model_scale=self.config.model_scale)
        self.weights = loss_weights or LossWeights()
        self.weights.validate()

        torch.manual_seed(self.config.seed)
        self.bundle = GeneratorBundle(self.model_config)
        self.disc = PatchDiscriminator(self.model_config)
        self.backbone = RandomPyramidBackbone(seed=backbone_seed)
        self.rng = np.random.default_rng(self.config.seed)
        self.tf_state = TeacherForcingState(
            self.config.tf_window, self.config.d_start, self.config.d_end)

        self.g_opt = torch.optim.Adam(
            self._stage_parameters(), lr=self.config.learning_rate,
            betas=(self.config.beta1, self.config.beta2))
        self.d_opt = torch.optim.Adam(
            self.disc.parameters(), lr=self.config.learning_rate,
            betas=(self.config.beta1, self.config.beta2))
        self.g_steps = 0

    def _stage_parameters(self):
        stage = self.config.stage
        if stage == "coarse":
            return list(self.bundle.coarse.parameters())
        if stage == "depth":
            return list(self.bundle.depth.parameters())
        if stage == "refine":
            return list(self.bundle.refine.parameters())
        return list(self.bundle.parameters())

    def uses_adversary(self):
        return self.config.stage in ("refine", "joint")

    def uses_recurrence(self):
        return self.config.stage in ("refine", "joint")

    # ------------------------------------------------------------------
    # single-frame feedback pass used when teacher forcing is off
    # ------------------------------------------------------------------

    def _self_feedback(self, frame):
        mask = torch.from_numpy(frame.mask.astype(np.float32)).unsqueeze(0)
        rgb = rgb_to_tensor(frame.rgb).unsqueeze(0)
        depth = torch.from_numpy(frame.depth.astype(np.float32)).unsqueeze(0)
        masked_rgb = rgb * (1 - mask.unsqueeze(1))
        masked_depth = depth * (1 - mask)
        with torch.no_grad():
            coarse = self.bundle.coarse(masked_rgb, mask)
            refined, _ = self.bundle.refine(
                coarse, torch.zeros_like(coarse), torch.zeros_like(mask))
            completed = self.bundle.depth(refined, masked_depth, mask)
        return (tensor_to_rgb(refined[0]),
                completed[0, 0].numpy().astype(np.float64))

    def _warped_previous(self, sample, tf_prob):
        """Warp the previous completed frame into the current view."""
        prev = sample["prev_dyn"]
        if prev is None or not self.uses_recurrence():
            h, w = sample["dyn"].depth.shape
            return (np.zeros((h, w, 3), dtype=np.uint8),
                    np.zeros((h, w), dtype=np.uint8), False)
        forced = bool(self.rng.random() < tf_prob)
        if forced:
            prev_rgb = sample["prev_sta"].rgb
            prev_depth = sample["prev_sta"].depth.astype(np.float64)
        else:
            prev_rgb, prev_depth = self._self_feedback(prev)
        transform = relative_transform(prev.pose, sample["dyn"].pose)
        warped = warp_forward(prev_rgb, prev_depth, sample["camera"],
                              transform)
        return warped.image, warped.visibility, forced

    # ------------------------------------------------------------------
    # one optimization step on a minibatch of samples
    # ------------------------------------------------------------------

    def train_step(self, batch):
        tf_prob = self.tf_state.probability()
        masked_rgb, masks, targets = [], [], []
        depths_in, depth_targets = [], []
        warped_list, vis_list = [], []
        n_forced = 0
        for sample in batch:
            dyn, sta = sample["dyn"], sample["sta"]
            mask = torch.from_numpy(dyn.mask.astype(np.float32))
            masks.append(mask)
            masked_rgb.append(rgb_to_tensor(dyn.rgb) * (1 - mask))
            targets.append(rgb_to_tensor(sta.rgb))
            depths_in.append(
                torch.from_numpy(dyn.depth.astype(np.float32)) * (1 - mask))
            depth_targets.append(
                torch.from_numpy(sta.depth.astype(np.float32)))
            warped, vis, forced = self._warped_previous(sample, tf_prob)
            n_forced += int(forced)
            warped_list.append(rgb_to_tensor(warped))
            vis_list.append(torch.from_numpy(vis.astype(np.float32)))

        mask = torch.stack(masks)
        masked = torch.stack(masked_rgb)
        target = torch.stack(targets)
        depth_in = torch.stack(depths_in)
        depth_target = torch.stack(depth_targets).unsqueeze(1)
        warped = torch.stack(warped_list)
        visibility = torch.stack(vis_list)

        stage = self.config.stage
        coarse = self.bundle.coarse(masked, mask)
        if stage == "refine":
            # coarse weights come from a frozen pretraining checkpoint
            coarse = coarse.detach()
        refined = coarse
        if stage in ("refine", "joint"):
            refined, _ = self.bundle.refine(coarse, warped, visibility)
        completed = None
        if stage in ("depth", "joint"):
            # Depth completion sees the refined image but never
            # backpropagates into it; depth pretraining uses ground truth.
            guidance = target if stage == "depth" else refined.detach()
            completed = self.bundle.depth(guidance, depth_in, mask)

        breakdown = {}
        if self.uses_adversary():
            self.d_opt.zero_grad()
            d_loss = gan_d_loss(self.disc(target, mask),
                                self.disc(refined.detach(), mask))
            d_loss.backward()
            self.d_opt.step()
            breakdown["d_loss"] = float(d_loss.detach())

        components = self._stage_components(
            coarse, refined, completed, target, depth_target, mask)
        total, term_values = total_loss(components, self.weights)
        self.g_opt.zero_grad()
        total.backward()
        self.g_opt.step()
        self.g_steps += 1
        breakdown.update(term_values)
        breakdown["tf_prob"] = tf_prob
        breakdown["tf_forced"] = n_forced

        if "image_l1" in term_values:
            self.tf_state.update(term_values["image_l1"])
        return breakdown

    def _stage_components(self, coarse, refined, completed, target,
                          depth_target, mask):
        stage = self.config.stage
        comps = {}
        if stage in ("coarse", "joint"):
            comps["coarse_l1"] = masked_l1(coarse, target, mask)
        if stage in ("refine", "joint"):
            ones = torch.ones_like(mask)
            comps["image_l1"] = masked_l1(refined, target, ones)
            comps["image_perceptual"] = perceptual_loss(
                refined, target, self.backbone)
            comps["image_style"] = style_loss(refined, target, self.backbone)
            comps["image_gan"] = gan_g_loss(self.disc(refined, mask))
        if stage in ("depth", "joint"):
            comps["depth_l1"] = masked_l1(completed, depth_target, mask)
            comps["depth_smooth"] = smoothness_loss(completed)
        return comps

    # ------------------------------------------------------------------
    # full stage loop with early stopping
    # ------------------------------------------------------------------

    def fit(self, sequences, out_dir, init_checkpoints=None):
        """Train until the epoch budget or the patience counter runs out.

        `init_checkpoints` maps sub-network name (coarse, refine, depth) to
        a checkpoint path; the joint stage requires all three.
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        init_checkpoints = init_checkpoints or {}
        if self.config.stage == "joint":
            missing = {"coarse", "refine", "depth"} - set(init_checkpoints)
            if missing:
                raise TrainingError(
                    "joint stage needs checkpoints for every sub-network; "
                    f"missing: {sorted(missing)}")
        for subnet, path in init_checkpoints.items():
            apply_checkpoint(self.bundle, load_checkpoint(path),
                             disc=self.disc if subnet == "refine" else None,
                             subnet=subnet)

        samples = [s for pair in sequences for s in sequence_samples(pair)]
        if not samples:
            raise TrainingError("no training samples")

        best_loss = float("inf")
        best_state = None
        best_epoch = -1
        bad_epochs = 0
        history = []
        log_path = out_dir / "log.jsonl"
        stop_reason = "epochs"
        with log_path.open("w") as log:
            for epoch in range(self.config.epochs):
                order = self.rng.permutation(len(samples))
                epoch_totals = []
                agg = collections.defaultdict(list)
                for start in range(0, len(order), self.config.batch_size):
                    batch = [samples[i]
                             for i in order[start:start +
                                            self.config.batch_size]]
                    breakdown = self.train_step(batch)
                    epoch_totals.append(breakdown["total"])
                    for k, v in breakdown.items():
                        agg[k].append(v)
                    if (self.config.max_steps and
                            self.g_steps >= self.config.max_steps):
                        break
                record = {"epoch": epoch,
                          "steps": self.g_steps}
                record.update({k: float(np.mean(v)) for k, v in agg.items()})
                history.append(record)
                log.write(json.dumps(record) + "\n")

                mean_total = float(np.mean(epoch_totals))
                if mean_total < best_loss - 1e-12:
                    best_loss = mean_total
                    best_epoch = epoch
                    best_state = (copy.deepcopy(self.bundle.state_dict()),
                                  copy.deepcopy(self.disc.state_dict()))
                    bad_epochs = 0
                else:
                    bad_epochs += 1
                    if bad_epochs >= self.config.patience:
                        stop_reason = "patience"
                        break
                if (self.config.max_steps and
                        self.g_steps >= self.config.max_steps):
                    stop_reason = "max_steps"
                    break

        if best_state is not None:
            self.bundle.load_state_dict(best_state[0])
            self.disc.load_state_dict(best_state[1])
        meta = {"stage": self.config.stage, "best_epoch": best_epoch,
                "best_loss": best_loss, "steps": self.g_steps,
                "stop_reason": stop_reason}
        ckpt_path = out_dir / "checkpoint.pkl"
        save_checkpoint(ckpt_path, self.bundle,
                        self.disc if self.uses_adversary() else None, meta)
        manifest = dict(meta)
        manifest["train_config"] = dataclasses.asdict(self.config)
        manifest["model_config"] = dataclasses.asdict(self.model_config)
        manifest["checkpoint"] = ckpt_path.name
        manifest["epochs_run"] = len(history)
        (out_dir / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True))
        return history
