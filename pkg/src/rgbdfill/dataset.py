"""Paired dynamic/static RGB-D sequence format, toy generator, augmentation.

On-disk layout, one sequence per directory:

    <root>/<split>/<seq_id>/
        rgb_dyn/%06d.png      8-bit RGB
        depth_dyn/%06d.npy    float32 depth, normalized to [0, 1]
        sem_dyn/%06d.png      8-bit semantic labels
        rgb_sta/..., depth_sta/..., sem_sta/...
        poses.csv             index,x,y,z,roll,pitch,yaw (one row per frame)
        camera.json           W, H, fov_degrees, mount, dynamic_class_ids

Dynamic-object masks are not stored; they are derived from the semantic
labels and the configured dynamic class ids at load time.
"""

import csv
import json
import math
import os
from dataclasses import dataclass, field

import cv2
import numpy as np
from PIL import Image

from .config import (DEFAULT_DYNAMIC_IDS, MAX_DEPTH_METERS, N_CLASSES,
                     AugmentConfig, ToySceneConfig)
from .geometry import CameraModel, intrinsics_from_fov

POSE_TOLERANCE_M = 1e-6
POSE_TOLERANCE_DEG = 1e-6

MODALITY_DIRS = {
    "rgb_dyn": "png", "depth_dyn": "npy", "sem_dyn": "png",
    "rgb_sta": "png", "depth_sta": "npy", "sem_sta": "png",
}


class DatasetError(ValueError):
    pass


class AlignmentError(DatasetError):
    pass


@dataclass
class Frame:
    """One timestep: RGB (uint8), depth [0,1], labels, mask and camera pose."""
    rgb: np.ndarray
    depth: np.ndarray
    semantic: np.ndarray
    mask: np.ndarray
    pose: np.ndarray
    timestamp_index: int

    def validate(self):
        h, w = self.depth.shape
        if self.rgb.shape != (h, w, 3):
            raise DatasetError("rgb/depth spatial dims differ")
        if self.semantic.shape != (h, w) or self.mask.shape != (h, w):
            raise DatasetError("semantic/mask spatial dims differ")
        if self.depth.min() < 0.0 or self.depth.max() > 1.0:
            raise DatasetError("depth values outside [0, 1]")
        if not np.isin(self.mask, (0, 1)).all():
            raise DatasetError("mask must be binary")
        if self.semantic.max(initial=0) >= N_CLASSES:
            raise DatasetError("semantic label out of range")
        if self.pose.shape != (6,):
            raise DatasetError("pose must be a 6-vector")


@dataclass
class SequencePair:
    dynamic_frames: list
    static_frames: list
    camera: CameraModel
    mount_translation: np.ndarray = field(
        default_factory=lambda: np.zeros(3))
    dynamic_ids: tuple = DEFAULT_DYNAMIC_IDS
    fov_degrees: float = None

    def __len__(self):
        return len(self.dynamic_frames)

    def validate(self):
        if len(self.dynamic_frames) != len(self.static_frames):
            raise AlignmentError("dynamic/static frame counts differ")
        for i, (d, s) in enumerate(zip(self.dynamic_frames,
                                       self.static_frames)):
            d.validate()
            s.validate()
            dp = np.abs(d.pose[:3] - s.pose[:3])
            da = np.abs(angle_diff_deg(d.pose[3:], s.pose[3:]))
            if dp.max() > POSE_TOLERANCE_M or da.max() > POSE_TOLERANCE_DEG:
                raise AlignmentError(f"pose mismatch at frame {i}")
            if s.mask.any():
                raise AlignmentError(f"static frame {i} has a nonzero mask")


def angle_diff_deg(a, b):
    """Shortest signed angular difference in degrees, elementwise."""
    return (np.asarray(a) - np.asarray(b) + 180.0) % 360.0 - 180.0


def extract_dynamic_mask(semantic, dynamic_ids):
    """Binary mask: 1 where the label belongs to a dynamic class."""
    semantic = np.asarray(semantic)
    if semantic.max(initial=0) >= N_CLASSES:
        raise DatasetError("semantic label out of range")
    for i in dynamic_ids:
        if i >= N_CLASSES:
            raise DatasetError(f"dynamic id {i} out of range")
    return np.isin(semantic, list(dynamic_ids)).astype(np.uint8)


# ---------------------------------------------------------------------------
# Load / save
# ---------------------------------------------------------------------------

def _seq_dir(root, split, seq_id):
    return os.path.join(str(root), split, seq_id)


def list_sequences(root, split):
    d = os.path.join(str(root), split)
    if not os.path.isdir(d):
        raise DatasetError(f"missing split directory: {d}")
    return sorted(e for e in os.listdir(d)
                  if os.path.isdir(os.path.join(d, e)))


def load_sequence(root, split, seq_id=None):
    """Load one sequence; defaults to the first sequence of the split."""
    if seq_id is None:
        ids = list_sequences(root, split)
        if not ids:
            raise DatasetError(f"no sequences under {root}/{split}")
        seq_id = ids[0]
    base = _seq_dir(root, split, seq_id)

    with open(os.path.join(base, "camera.json")) as fh:
        meta = json.load(fh)
    cam = intrinsics_from_fov(meta["width"], meta["height"],
                              meta["fov_degrees"])
    mount = np.asarray(meta.get("mount_translation", [0, 0, 0]), dtype=float)
    dynamic_ids = tuple(meta.get("dynamic_class_ids", DEFAULT_DYNAMIC_IDS))

    poses = {}
    with open(os.path.join(base, "poses.csv")) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "index":
            raise DatasetError("poses.csv missing header row")
        for row in reader:
            poses[int(row[0])] = np.array([float(x) for x in row[1:7]])

    indices = sorted(poses)
    dyn, sta = [], []
    for idx in indices:
        frames = {}
        for modality, ext in MODALITY_DIRS.items():
            path = os.path.join(base, modality, f"{idx:06d}.{ext}")
            if not os.path.exists(path):
                raise DatasetError(
                    f"frame {idx}: missing modality file {modality}")
            if ext == "png":
                frames[modality] = np.asarray(Image.open(path))
            else:
                frames[modality] = np.load(path)
        for side, frames_list in (("dyn", dyn), ("sta", sta)):
            sem = frames[f"sem_{side}"]
            frames_list.append(Frame(
                rgb=frames[f"rgb_{side}"],
                depth=frames[f"depth_{side}"].astype(np.float32),
                semantic=sem,
                mask=extract_dynamic_mask(sem, dynamic_ids),
                pose=poses[idx],
                timestamp_index=idx,
            ))
    pair = SequencePair(dyn, sta, cam, mount, dynamic_ids,
                        fov_degrees=meta["fov_degrees"])
    pair.validate()
    return pair


def save_sequence(pair, root, split, seq_id="000"):
    """Write a SequencePair in the on-disk layout. Returns the sequence dir."""
    base = _seq_dir(root, split, seq_id)
    for modality in MODALITY_DIRS:
        os.makedirs(os.path.join(base, modality), exist_ok=True)

    fov = pair.fov_degrees
    if fov is None:
        fov = math.degrees(
            2.0 * math.atan(pair.camera.width / (2.0 * pair.camera.f)))
    with open(os.path.join(base, "camera.json"), "w") as fh:
        json.dump({
            "width": pair.camera.width,
            "height": pair.camera.height,
            "fov_degrees": fov,
            "mount_translation": list(map(float, pair.mount_translation)),
            "dynamic_class_ids": list(pair.dynamic_ids),
        }, fh, indent=2, sort_keys=True)

    with open(os.path.join(base, "poses.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "x", "y", "z", "roll", "pitch", "yaw"])
        for f in pair.dynamic_frames:
            writer.writerow([f.timestamp_index] +
                            [repr(float(v)) for v in f.pose])

    for side, frames in (("dyn", pair.dynamic_frames),
                         ("sta", pair.static_frames)):
        for f in frames:
            idx = f.timestamp_index
            Image.fromarray(f.rgb).save(
                os.path.join(base, f"rgb_{side}", f"{idx:06d}.png"))
            np.save(os.path.join(base, f"depth_{side}", f"{idx:06d}.npy"),
                    f.depth.astype(np.float32))
            Image.fromarray(f.semantic.astype(np.uint8)).save(
                os.path.join(base, f"sem_{side}", f"{idx:06d}.png"))
    return base


# ---------------------------------------------------------------------------
# Toy scene generator
# ---------------------------------------------------------------------------

SKY_CLASS = 9        # "other"
GROUND_CLASS = 4     # "road"
STATIC_CLASS = 0     # "building"
DYNAMIC_CLASS = 11   # "vehicle"

SKY_ID = -1
GROUND_ID = 0
# object ids: 1..n_static for static boxes, then dynamic boxes


def _ray_aabb(origin, dirs, lo, hi):
    """Slab intersection of rays with an axis-aligned box.

    dirs: (..., 3). Returns (t_enter, hit_mask); t along the ray.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t0 = (lo - origin) * inv
    t1 = (hi - origin) * inv
    tmin = np.minimum(t0, t1).max(axis=-1)
    tmax = np.maximum(t0, t1).min(axis=-1)
    hit = (tmax >= tmin) & (tmax > 0)
    t = np.where(tmin > 0, tmin, tmax)
    return np.where(hit, t, np.inf), hit


def _checker_colors(rng):
    a = rng.uniform(0.25, 0.45, size=3)
    b = rng.uniform(0.5, 0.7, size=3)
    return a, b


@dataclass
class _Box:
    lo: np.ndarray
    hi: np.ndarray
    color: np.ndarray
    velocity: np.ndarray   # meters per frame; zero for static boxes

    def at(self, frame_idx):
        off = self.velocity * frame_idx
        return self.lo + off, self.hi + off


def _build_scene(config, rng):
    static, dynamic = [], []
    for _ in range(config.n_static):
        cx = rng.uniform(8.0, 40.0)
        cy = rng.uniform(4.0, 12.0) * rng.choice([-1.0, 1.0])
        sx, sy, sz = rng.uniform(2.0, 5.0, size=3)
        lo = np.array([cx - sx, cy - sy, 0.0])
        hi = np.array([cx + sx, cy + sy, sz * 2.0])
        static.append(_Box(lo, hi, rng.uniform(0.3, 0.9, size=3),
                           np.zeros(3)))
    for _ in range(config.n_dynamic):
        cx = rng.uniform(6.0, 20.0)
        cy = rng.uniform(-2.5, 2.5)
        sx, sy, sz = rng.uniform(0.6, 1.4, size=3)
        lo = np.array([cx - sx, cy - sy, 0.0])
        hi = np.array([cx + sx, cy + sy, sz * 1.5])
        vel = np.array([rng.uniform(0.3, 1.0) * config.dynamic_speed,
                        rng.uniform(-0.15, 0.15), 0.0])
        dynamic.append(_Box(lo, hi, rng.uniform(0.4, 1.0, size=3), vel))
    return static, dynamic


def _render(config, cam, pose_rh_matrix, boxes, shadow_boxes, checker):
    """Ray-cast one frame. Returns rgb [0,1] float, depth [0,1], id buffer."""
    h, w = config.height, config.width
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    rays_cam = np.stack([us, vs, np.ones_like(us)], -1) @ cam.matrix_inv.T
    r_wc = pose_rh_matrix[:3, :3]
    origin = pose_rh_matrix[:3, 3]
    dirs = rays_cam @ r_wc.T                      # world direction, z_cam == 1

    # t measured in camera-z units (dirs have unit camera depth), so the
    # nearest-hit t *is* the metric camera depth.
    best_t = np.full((h, w), np.inf)
    best_id = np.full((h, w), SKY_ID, dtype=np.int32)

    # ground plane z = 0
    dz = dirs[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = -origin[2] / dz
    ground_ok = (dz < 0) & (tg > 0)
    best_t = np.where(ground_ok, tg, best_t)
    best_id = np.where(ground_ok, GROUND_ID, best_id)

    for obj_id, box in boxes:
        t, hit = _ray_aabb(origin, dirs, box[0], box[1])
        closer = hit & (t < best_t)
        best_t = np.where(closer, t, best_t)
        best_id = np.where(closer, obj_id, best_id)

    depth = np.where(np.isinf(best_t), 1.0,
                     np.clip(best_t / MAX_DEPTH_METERS, 0.0, 1.0))

    # shade
    rgb = np.zeros((h, w, 3))
    sky = best_id == SKY_ID
    rgb[sky] = (0.55, 0.7, 0.9)

    hitpts = origin + dirs * np.where(np.isinf(best_t), 0.0, best_t)[..., None]
    ground = best_id == GROUND_ID
    cell = (np.floor(hitpts[..., 0]).astype(np.int64)
            + np.floor(hitpts[..., 1]).astype(np.int64))
    ground_col = np.where((cell % 2 == 0)[..., None], checker[0], checker[1])
    shadow = np.zeros((h, w), dtype=bool)
    for lo, hi in shadow_boxes:
        center = (lo[:2] + hi[:2]) / 2.0
        dist = np.linalg.norm(hitpts[..., :2] - center, axis=-1)
        shadow |= dist < config.shadow_radius
    shade = np.where(shadow[..., None], config.shadow_darkening, 1.0)
    rgb = np.where(ground[..., None], ground_col * shade, rgb)

    for obj_id, box, color in boxes_with_color(boxes):
        sel = best_id == obj_id
        # cheap lambert-ish shading keyed to the hit height
        z01 = np.clip(hitpts[..., 2] / max(box[1][2], 1e-9), 0.0, 1.0)
        rgb = np.where(sel[..., None], color * (0.6 + 0.4 * z01[..., None]),
                       rgb)
    return np.clip(rgb, 0.0, 1.0), depth, best_id


def boxes_with_color(boxes):
    for obj_id, box in boxes:
        yield obj_id, box, box[2] if len(box) > 2 else None


def generate_toy_sequence(config=None, seed=0, return_id_buffers=False):
    """Render a paired dynamic/static sequence with exact geometry.

    Deterministic for a fixed seed. Dynamic boxes slide along the ground and
    darken a disk of ground around their footprint so that the refinement
    task (shadow removal) is exercised.
    """
    config = config or ToySceneConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    cam = intrinsics_from_fov(config.width, config.height,
                              config.fov_degrees)
    static, dynamic = _build_scene(config, rng)
    checker = _checker_colors(rng)

    from .geometry import pose_to_world_from_camera

    dyn_frames, sta_frames, id_buffers = [], [], []
    for k in range(config.n_frames):
        # left-handed dataset pose: camera drives forward, slight yaw wobble
        pose = np.array([k * config.forward_speed, 0.0, 1.6,
                         0.0, 0.0, 2.0 * math.sin(0.4 * k)])
        m = pose_to_world_from_camera(pose)

        static_boxes = [(1 + i, (b.lo, b.hi, b.color))
                        for i, b in enumerate(static)]
        dyn_boxes = []
        shadow_boxes = []
        for i, b in enumerate(dynamic):
            lo, hi = b.at(k)
            dyn_boxes.append((1 + len(static) + i, (lo, hi, b.color)))
            shadow_boxes.append((lo, hi))

        rgb_s, depth_s, ids_s = _render(config, cam, m, static_boxes, [],
                                        checker)
        rgb_d, depth_d, ids_d = _render(config, cam, m,
                                        static_boxes + dyn_boxes,
                                        shadow_boxes, checker)

        dynamic_hit = ids_d >= 1 + len(static)
        sem_d = _semantics_from_ids(ids_d, len(static))
        sem_s = _semantics_from_ids(ids_s, len(static))

        dyn_frames.append(Frame(
            rgb=_to_uint8(rgb_d), depth=depth_d.astype(np.float32),
            semantic=sem_d, mask=dynamic_hit.astype(np.uint8),
            pose=pose, timestamp_index=k))
        sta_frames.append(Frame(
            rgb=_to_uint8(rgb_s), depth=depth_s.astype(np.float32),
            semantic=sem_s, mask=np.zeros_like(sem_s, dtype=np.uint8),
            pose=pose, timestamp_index=k))
        id_buffers.append((ids_d, ids_s))

    pair = SequencePair(dyn_frames, sta_frames, cam,
                        np.asarray(config.mount_translation, dtype=float),
                        fov_degrees=config.fov_degrees)
    pair.validate()
    if return_id_buffers:
        return pair, id_buffers
    return pair


def _semantics_from_ids(ids, n_static):
    sem = np.full(ids.shape, SKY_CLASS, dtype=np.uint8)
    sem[ids == GROUND_ID] = GROUND_CLASS
    sem[(ids >= 1) & (ids <= n_static)] = STATIC_CLASS
    sem[ids > n_static] = DYNAMIC_CLASS
    return sem


def _to_uint8(rgb01):
    return np.clip(np.rint(rgb01 * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def _jitter_rgb(rgb, brightness, contrast, saturation, hue):
    """Photometric jitter on a uint8 image; factors of 1 / hue 0 are no-ops."""
    x = rgb.astype(np.float32) / 255.0
    if brightness != 1.0:
        x = x * brightness
    if contrast != 1.0:
        gray_mean = float(cv2.cvtColor(
            np.clip(x, 0, 1), cv2.COLOR_RGB2GRAY).mean())
        x = (x - gray_mean) * contrast + gray_mean
    if saturation != 1.0:
        gray = cv2.cvtColor(np.clip(x, 0, 1).astype(np.float32),
                            cv2.COLOR_RGB2GRAY)[..., None]
        x = (x - gray) * saturation + gray
    if hue != 0.0:
        hsv = cv2.cvtColor(np.clip(x, 0, 1).astype(np.float32),
                           cv2.COLOR_RGB2HSV)
        hsv[..., 0] = (hsv[..., 0] + hue * 360.0) % 360.0
        x = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def _flip_frame(frame):
    return Frame(
        rgb=np.flip(frame.rgb, axis=1).copy(),
        depth=np.flip(frame.depth, axis=1).copy(),
        semantic=np.flip(frame.semantic, axis=1).copy(),
        mask=np.flip(frame.mask, axis=1).copy(),
        pose=frame.pose.copy(),
        timestamp_index=frame.timestamp_index,
    )


def augment(dyn_frame, sta_frame, cfg, rng):
    """Jointly augment an aligned dynamic/static frame pair.

    One photometric parameter draw is applied to both frames; a horizontal
    flip (if drawn) is applied to every modality. Depth values are never
    touched by the photometric jitter.
    """
    cfg = cfg or AugmentConfig()
    cfg.validate()
    b = rng.uniform(*cfg.brightness_range)
    c = rng.uniform(*cfg.contrast_range)
    s = rng.uniform(*cfg.saturation_range)
    h = rng.uniform(*cfg.hue_range)
    do_flip = rng.random() < cfg.flip_probability

    out = []
    for f in (dyn_frame, sta_frame):
        g = Frame(rgb=_jitter_rgb(f.rgb, b, c, s, h),
                  depth=f.depth.copy(), semantic=f.semantic.copy(),
                  mask=f.mask.copy(), pose=f.pose.copy(),
                  timestamp_index=f.timestamp_index)
        if do_flip:
            g = _flip_frame(g)
        g.validate()
        out.append(g)
    return out[0], out[1]
