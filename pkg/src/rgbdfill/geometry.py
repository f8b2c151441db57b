"""Pinhole camera model, pose algebra and depth-based forward warping.

Poses on disk follow the dataset's left-handed convention (x forward,
y right, z up, angles in degrees). All math in this module is right
handed: poses are converted once on entry and never again.
"""

import math
from dataclasses import dataclass

import numpy as np

from .config import MAX_DEPTH_METERS


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics. f in pixels, principal point (c_u, c_v)."""
    f: float
    c_u: float
    c_v: float
    width: int
    height: int

    def __post_init__(self):
        if self.f <= 0:
            raise GeometryError("focal length must be positive")
        if not (0 < self.c_u < self.width and 0 < self.c_v < self.height):
            raise GeometryError("principal point must lie inside the image")

    @property
    def matrix(self):
        return np.array([[self.f, 0.0, self.c_u],
                         [0.0, self.f, self.c_v],
                         [0.0, 0.0, 1.0]])

    @property
    def matrix_inv(self):
        return np.array([[1.0 / self.f, 0.0, -self.c_u / self.f],
                         [0.0, 1.0 / self.f, -self.c_v / self.f],
                         [0.0, 0.0, 1.0]])


def intrinsics_from_fov(width, height, fov_degrees):
    """Camera model with f = W / (2 tan(FOV/2)), principal point at center."""
    if not 0.0 < fov_degrees < 180.0:
        raise GeometryError(f"fov must be in (0, 180) degrees, got {fov_degrees}")
    if width <= 0 or height <= 0:
        raise GeometryError("image dimensions must be positive")
    f = width / (2.0 * math.tan(fov_degrees * math.pi / 360.0))
    return CameraModel(f=f, c_u=width / 2.0, c_v=height / 2.0,
                       width=width, height=height)


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid transform: x' = R x + t."""
    rotation: np.ndarray     # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if R.shape != (3, 3):
            raise GeometryError("rotation must be 3x3")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise GeometryError("rotation is not orthonormal")
        if not math.isclose(np.linalg.det(R), 1.0, abs_tol=1e-9):
            raise GeometryError("rotation must have determinant +1")

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other):
        """self ∘ other: apply `other` first."""
        return RigidTransform.from_matrix(self.matrix @ other.matrix)

    def inverse(self):
        return RigidTransform(self.rotation.T,
                              -self.rotation.T @ self.translation)

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def is_identity(self):
        return (np.array_equal(self.rotation, np.eye(3))
                and not self.translation.any())


def euler_to_rotation(roll, pitch, yaw):
    """R = Rz(yaw) @ Ry(pitch) @ Rx(roll); angles in degrees."""
    r, p, y = np.deg2rad([roll, pitch, yaw])
    cr, sr = math.cos(r), math.sin(r)
    cp, sp = math.cos(p), math.sin(p)
    cy, sy = math.cos(y), math.sin(y)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rz @ ry @ rx


def rotation_to_euler(R):
    """Inverse of euler_to_rotation, degrees. Pitch restricted to (-90, 90)."""
    pitch = math.asin(max(-1.0, min(1.0, -R[2, 0])))
    cp = math.cos(pitch)
    if abs(cp) < 1e-12:
        # gimbal lock: conventionally put all z-rotation into yaw
        yaw = math.atan2(-R[0, 1], R[1, 1])
        roll = 0.0
    else:
        yaw = math.atan2(R[1, 0], R[0, 0])
        roll = math.atan2(R[2, 1], R[2, 2])
    return np.rad2deg([roll, pitch, yaw])


# Left-handed (x fwd, y right, z up) -> right-handed (x fwd, y left, z up).
_HAND_FLIP = np.diag([1.0, -1.0, 1.0])

# Camera frame (x right, y down, z forward) expressed in body axes
# (x forward, y left, z up).
CAM_FROM_BODY = np.array([[0.0, -1.0, 0.0],
                          [0.0, 0.0, -1.0],
                          [1.0, 0.0, 0.0]])


def pose_to_world_from_camera(pose):
    """4x4 world-from-camera matrix for a left-handed 6-DoF pose.

    pose = (x, y, z, roll, pitch, yaw); meters and degrees.
    """
    pose = np.asarray(pose, dtype=np.float64)
    r_body = _HAND_FLIP @ euler_to_rotation(*pose[3:6]) @ _HAND_FLIP
    t = _HAND_FLIP @ pose[:3]
    m = np.eye(4)
    m[:3, :3] = r_body @ CAM_FROM_BODY.T
    m[:3, 3] = t
    return m


def world_from_camera_to_pose(m):
    """Inverse of pose_to_world_from_camera."""
    r_body = _HAND_FLIP @ (m[:3, :3] @ CAM_FROM_BODY) @ _HAND_FLIP
    t = _HAND_FLIP @ m[:3, 3]
    roll, pitch, yaw = rotation_to_euler(r_body)
    return np.array([t[0], t[1], t[2], roll, pitch, yaw])


def relative_transform(pose_a, pose_b):
    """Camera-frame transform mapping camera-a points into camera b."""
    a = pose_to_world_from_camera(pose_a)
    b = pose_to_world_from_camera(pose_b)
    return RigidTransform.from_matrix(np.linalg.inv(b) @ a)


@dataclass
class WarpResult:
    image: np.ndarray        # H x W x C, invalid pixels set to 0
    depth: np.ndarray        # H x W normalized depth, invalid pixels 0
    visibility: np.ndarray   # H x W uint8, 1 where a source pixel landed


def project_points(depth, cam, transform, depth_scale=MAX_DEPTH_METERS):
    """Per-pixel projection into the target view, before rasterization.

    Returns (u, v, z_meters, valid): float target coordinates, metric target
    depth, and a mask of source pixels that are in front of both cameras.
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    d = depth * depth_scale
    valid = depth > 0

    rays = np.stack([us, vs, np.ones_like(us)], axis=-1) @ cam.matrix_inv.T
    pts = rays * d[..., None]
    pts = pts @ transform.rotation.T + transform.translation
    proj = pts @ cam.matrix.T
    wprime = proj[..., 2]
    valid &= wprime > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(valid, proj[..., 0] / wprime, 0.0)
        v = np.where(valid, proj[..., 1] / wprime, 0.0)
    return u, v, np.where(valid, wprime, 0.0), valid


def warp_forward(image, depth, cam, transform, depth_scale=MAX_DEPTH_METERS):
    """Forward-warp image and depth into the view given by `transform`.

    Source pixels are lifted through the depth map, rigidly transformed and
    reprojected; collisions on a target cell are resolved by nearest depth.
    """
    image = np.asarray(image)
    depth = np.asarray(depth, dtype=np.float64)
    if image.shape[:2] != depth.shape:
        raise GeometryError("image and depth spatial dims differ")
    h, w = depth.shape
    squeeze = image.ndim == 2
    img = image[..., None] if squeeze else image

    if transform.is_identity():
        visibility = (depth > 0).astype(np.uint8)
        out_img = np.where(visibility[..., None].astype(bool), img, 0)
        out_depth = np.where(visibility.astype(bool), depth, 0.0)
        return WarpResult(out_img[..., 0] if squeeze else out_img,
                          out_depth, visibility)

    u, v, z, valid = project_points(depth, cam, transform, depth_scale)
    ui = np.rint(u).astype(np.int64)
    vi = np.rint(v).astype(np.int64)
    valid &= (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)

    src_flat = np.flatnonzero(valid)
    tgt_flat = vi.reshape(-1)[src_flat] * w + ui.reshape(-1)[src_flat]
    z_flat = z.reshape(-1)[src_flat]

    # Painter order: write farthest first so the nearest depth wins.
    order = np.argsort(-z_flat, kind="stable")
    tgt = tgt_flat[order]
    src = src_flat[order]

    out_img = np.zeros((h * w, img.shape[2]), dtype=img.dtype)
    out_depth = np.zeros(h * w)
    visibility = np.zeros(h * w, dtype=np.uint8)
    out_img[tgt] = img.reshape(-1, img.shape[2])[src]
    out_depth[tgt] = z_flat[order] / depth_scale
    visibility[tgt] = 1

    out_img = out_img.reshape(h, w, -1)
    return WarpResult(out_img[..., 0] if squeeze else out_img,
                      out_depth.reshape(h, w),
                      visibility.reshape(h, w))


def aggregate_pointcloud(frames, cam, stride=1, depth_scale=MAX_DEPTH_METERS):
    """Lift (rgb, depth, pose) frames into one colored world-frame point set.

    Pixels are subsampled on a `stride` grid; depth<=0 pixels are skipped.
    Returns (points Nx3 float64, colors Nx3 uint8).
    """
    if stride < 1:
        raise GeometryError("stride must be >= 1")
    all_pts, all_cols = [], []
    for rgb, depth, pose in frames:
        depth = np.asarray(depth, dtype=np.float64)
        rgb = np.asarray(rgb)
        h, w = depth.shape
        us, vs = np.meshgrid(np.arange(0, w, stride), np.arange(0, h, stride))
        d = depth[vs, us] * depth_scale
        keep = d > 0
        us, vs, d = us[keep], vs[keep], d[keep]
        rays = np.stack([us, vs, np.ones_like(us)], -1) @ cam.matrix_inv.T
        pts_cam = rays * d[:, None]
        m = pose_to_world_from_camera(pose)
        pts = pts_cam @ m[:3, :3].T + m[:3, 3]
        cols = rgb[vs, us]
        if cols.dtype != np.uint8:
            cols = np.clip((cols.astype(np.float64) + 1.0) / 2.0 * 255.0,
                           0, 255).astype(np.uint8)
        all_pts.append(pts)
        all_cols.append(cols)
    if not all_pts:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8)
    return np.concatenate(all_pts), np.concatenate(all_cols)


def write_ply(path, points, colors):
    """ASCII PLY with per-vertex uchar color."""
    points = np.asarray(points, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.uint8)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        for p, c in zip(points, colors):
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}\n")


def read_ply(path):
    """Minimal ASCII PLY reader (round-trip checks and the CLI)."""
    with open(path) as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise GeometryError("not a PLY file")
        n = 0
        while True:
            line = fh.readline().strip()
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            if line == "end_header":
                break
        pts = np.zeros((n, 3))
        cols = np.zeros((n, 3), dtype=np.uint8)
        for i in range(n):
            parts = fh.readline().split()
            pts[i] = [float(x) for x in parts[:3]]
            cols[i] = [int(x) for x in parts[3:6]]
    return pts, cols
