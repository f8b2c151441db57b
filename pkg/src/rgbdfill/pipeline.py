"""Online inference: one frame in, one completed RGB-D frame out.

The pipeline never sees future frames. Each step runs the coarse inpaint,
warps the previous refined output into the current view through the
previous completed depth, refines, and completes the depth map. Odometry
comes from a pluggable provider; if the provider fails, the step falls
back to an identity transform and logs a warning.
"""

import dataclasses
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .dataset import Frame, SequencePair
from .geometry import RigidTransform, relative_transform, warp_forward
from .models import GeneratorBundle
from .noise import perturb_odometry
from .training import (apply_checkpoint, load_checkpoint, rgb_to_tensor,
                       tensor_to_rgb)

logger = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


@dataclasses.dataclass
class RecurrentState:
    """Previous-frame buffers feeding the gated recurrence."""
    prev_refined_rgb: np.ndarray = None
    prev_completed_depth: np.ndarray = None
    prev_pose: np.ndarray = None

    @property
    def initialized(self):
        return self.prev_refined_rgb is not None


@dataclasses.dataclass
class StepResult:
    refined_rgb: np.ndarray       # H x W x 3 uint8
    completed_depth: np.ndarray   # H x W float32 in [0, 1]
    coarse_rgb: np.ndarray        # H x W x 3 uint8
    gating_mask: np.ndarray       # H/8 x W/8 float32
    state: RecurrentState


class GroundTruthOdometry:
    """Relative transform straight from the dataset poses."""

    def relative(self, prev_pose, pose, prev_refined, current_coarse):
        return relative_transform(prev_pose, pose)


class NoisyOdometry(GroundTruthOdometry):
    """Ground truth plus the ablation noise model."""

    def __init__(self, p_n, rng, config=None):
        self.p_n = p_n
        self.rng = rng
        self.config = config

    def relative(self, prev_pose, pose, prev_refined, current_coarse):
        clean = super().relative(prev_pose, pose, prev_refined,
                                 current_coarse)
        return perturb_odometry(clean, self.p_n, self.rng, self.config)


class ExternalOdometry:
    """Adapter for an external estimator fed the two best inpainted views.

    The estimator callable receives the previous refined RGB frame and the
    current coarsely inpainted RGB frame, both uint8, and must return a
    RigidTransform mapping previous-camera points into the current camera.
    """

    def __init__(self, estimator):
        self.estimator = estimator

    def relative(self, prev_pose, pose, prev_refined, current_coarse):
        result = self.estimator(prev_refined, current_coarse)
        if not isinstance(result, RigidTransform):
            raise PipelineError("external estimator must return a "
                                "RigidTransform")
        return result


def load_bundle(path):
    """Build a generator bundle sized from a checkpoint's stored config."""
    blob = load_checkpoint(path)
    bundle = GeneratorBundle(ModelConfig(**blob["model_config"]))
    apply_checkpoint(bundle, blob)
    bundle.eval()
    return bundle


class InpaintingPipeline:
    """Sequential executor of the recurrent test-time graph."""

    def __init__(self, bundle, camera, odometry=None):
        self.bundle = bundle.eval()
        self.camera = camera
        self.odometry = odometry or GroundTruthOdometry()

    def reset(self):
        return RecurrentState()

    @torch.no_grad()
    def step(self, frame, state):
        mask = torch.from_numpy(frame.mask.astype(np.float32)).unsqueeze(0)
        rgb = rgb_to_tensor(frame.rgb).unsqueeze(0)
        masked_rgb = rgb * (1 - mask.unsqueeze(1))
        masked_depth = (torch.from_numpy(frame.depth.astype(np.float32))
                        .unsqueeze(0) * (1 - mask))

        coarse = self.bundle.coarse(masked_rgb, mask)
        coarse_rgb = tensor_to_rgb(coarse[0])

        h, w = frame.depth.shape
        warped_rgb = np.zeros((h, w, 3), dtype=np.uint8)
        visibility = np.zeros((h, w), dtype=np.uint8)
        if state.initialized:
            try:
                transform = self.odometry.relative(
                    state.prev_pose, frame.pose,
                    state.prev_refined_rgb, coarse_rgb)
            except Exception:
                logger.warning("odometry provider failed at frame %d; "
                               "falling back to identity",
                               frame.timestamp_index, exc_info=True)
                transform = RigidTransform.identity()
            warped = warp_forward(state.prev_refined_rgb,
                                  state.prev_completed_depth,
                                  self.camera, transform)
            warped_rgb = warped.image
            visibility = warped.visibility

        refined, m_psi = self.bundle.refine(
            coarse, rgb_to_tensor(warped_rgb).unsqueeze(0),
            torch.from_numpy(visibility.astype(np.float32)).unsqueeze(0))
        completed = self.bundle.depth(refined, masked_depth, mask)

        refined_rgb = tensor_to_rgb(refined[0])
        completed_depth = completed[0, 0].numpy().astype(np.float32)
        new_state = RecurrentState(prev_refined_rgb=refined_rgb,
                                   prev_completed_depth=completed_depth,
                                   prev_pose=np.array(frame.pose))
        return StepResult(refined_rgb, completed_depth, coarse_rgb,
                          m_psi[0, 0].numpy().astype(np.float32), new_state)


def run_stream(pair, bundle, out_root=None, split="output", seq_id="000",
               odometry=None, dynamic_ids=None):
    """Run the pipeline over a sequence and optionally persist the outputs.

    Returns (output SequencePair, per-frame timing in milliseconds). The
    output pair holds the original dynamic frames alongside the predicted
    static-style frames and reloads through dataset.load_sequence; dynamic
    labels are rewritten to class 0 since the model predicts background.
    """
    if isinstance(bundle, (str, Path)):
        bundle = load_bundle(bundle)
    pipeline = InpaintingPipeline(bundle, pair.camera, odometry)
    dynamic_ids = dynamic_ids or pair.dynamic_ids

    state = pipeline.reset()
    out_frames = []
    timings_ms = []
    for frame in pair.dynamic_frames:
        start = time.perf_counter()
        result = pipeline.step(frame, state)
        timings_ms.append((time.perf_counter() - start) * 1000.0)
        state = result.state
        semantic = frame.semantic.copy()
        semantic[np.isin(semantic, dynamic_ids)] = 0
        out_frames.append(Frame(
            rgb=result.refined_rgb,
            depth=np.clip(result.completed_depth, 0.0, 1.0),
            semantic=semantic,
            mask=np.zeros_like(frame.mask),
            pose=np.array(frame.pose),
            timestamp_index=frame.timestamp_index))

    out_pair = SequencePair(dynamic_frames=list(pair.dynamic_frames),
                            static_frames=out_frames,
                            camera=pair.camera,
                            mount_translation=pair.mount_translation,
                            dynamic_ids=pair.dynamic_ids,
                            fov_degrees=pair.fov_degrees)
    if out_root is not None:
        from .dataset import save_sequence
        save_sequence(out_pair, out_root, split, seq_id)
        stats = {"frame_ms": timings_ms,
                 "mean_ms": float(np.mean(timings_ms)),
                 "frames": len(timings_ms)}
        seq_dir = Path(out_root) / split / seq_id
        seq_dir.mkdir(parents=True, exist_ok=True)
        (seq_dir / "timing.json").write_text(json.dumps(stats, indent=2))
    return out_pair, timings_ms
