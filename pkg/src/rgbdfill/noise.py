"""Input corruption models for the robustness ablation.

A single variable p_n in [0, 1] scales every noise source. Each operator
is deterministic under a fixed RNG and, at p_n = 0, leaves its input
unchanged except for two documented deterministic steps: the 20% contour
re-approximation of mask blobs and the Sobel edge zeroing of depth maps.
"""

import cv2
import numpy as np
from scipy.spatial.distance import pdist

from .config import DEPTH_EXEMPT_IDS, MAX_DEPTH_METERS, NoiseConfig
from .geometry import (RigidTransform, euler_to_rotation, rotation_to_euler)


def contour_radius(points):
    """Half the maximum pairwise distance between contour points."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        return 0.0
    return float(pdist(pts).max()) / 2.0


def _subsample_contour(points, fraction):
    """Keep an evenly spaced `fraction` of the contour, at least 3 points."""
    n = len(points)
    keep = max(3, int(np.ceil(n * fraction)))
    if keep >= n:
        return points
    idx = np.linspace(0, n - 1, keep, endpoint=False).astype(np.int64)
    return points[idx]


def _deform_contours(shape, contours, p_n, config, rng):
    """Subsample, radially offset and refill a set of blob contours."""
    out = np.zeros(shape, dtype=np.uint8)
    polygons = []
    for contour in contours:
        pts = contour.reshape(-1, 2).astype(np.float64)
        moments = cv2.moments(contour)
        if moments["m00"] != 0:
            center = np.array([moments["m10"] / moments["m00"],
                               moments["m01"] / moments["m00"]])
        else:
            center = pts.mean(axis=0)
        sigma = contour_radius(pts) / config.sigma_radius_divisor
        sub = _subsample_contour(pts, config.contour_fraction)
        radial = sub - center
        norms = np.linalg.norm(radial, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        eps = rng.normal(0.0, p_n * sigma, size=(len(sub), 1))
        deformed = sub + radial / norms * eps
        polygons.append(np.rint(deformed).astype(np.int32))
    if polygons:
        cv2.fillPoly(out, polygons, 1)
    return out


def perturb_mask(mask, p_n, rng, config=None):
    """Deform dynamic-object blobs by jittering their contours radially.

    Every blob is approximated by an evenly spaced 20% subset of its border
    pixels; each kept point moves away from the blob centroid by a Gaussian
    offset with sigma = p_n * r_i / 5, where r_i is the contour radius.
    """
    config = config or NoiseConfig()
    mask = np.asarray(mask)
    if not mask.any():
        return mask.astype(np.uint8)
    contours, _ = cv2.findContours(mask.astype(np.uint8),
                                   cv2.RETR_EXTERNAL,
                                   cv2.CHAIN_APPROX_NONE)
    return _deform_contours(mask.shape, contours, p_n, config, rng)


def perturb_depth(depth, semantic, p_n, rng, config=None):
    """Corrupt a normalized depth map with the four-stage sensor model.

    In order: per-blob shape deformation over every semantic class except
    road and sidewalk (skipped entirely at p_n = 0), deterministic zeroing
    of strong horizontal Sobel edges in the metric input, quadratic
    depth-dependent Gaussian pixel noise capped at 5 m, and dropout of
    max-range pixels with probability p_n.
    """
    config = config or NoiseConfig()
    depth = np.asarray(depth, dtype=np.float64)
    semantic = np.asarray(semantic)
    out = depth.copy()

    if p_n > 0:
        for class_id in np.unique(semantic):
            if class_id in DEPTH_EXEMPT_IDS:
                continue
            class_mask = (semantic == class_id).astype(np.uint8)
            contours, _ = cv2.findContours(class_mask, cv2.RETR_EXTERNAL,
                                           cv2.CHAIN_APPROX_NONE)
            for contour in contours:
                blob = np.zeros_like(class_mask)
                cv2.drawContours(blob, [contour], -1, 1, thickness=-1)
                deformed = _deform_contours(class_mask.shape, [contour],
                                            p_n, config, rng)
                fill = np.median(out[blob.astype(bool)])
                out[deformed.astype(bool)] = fill

    # Edge zeroing is computed on the clean metric input, always applied.
    metric_in = depth * MAX_DEPTH_METERS
    gradient = cv2.Sobel(metric_in, cv2.CV_64F, 1, 0, ksize=3)
    out[np.abs(gradient) > config.sobel_threshold] = 0.0

    metric = out * MAX_DEPTH_METERS
    sigma = (config.kinect_sigma_base
             + config.kinect_sigma_quad
             * (metric - config.kinect_sigma_pivot) ** 2)
    offsets = rng.normal(0.0, 1.0, size=metric.shape) * sigma * p_n
    offsets = np.clip(offsets, -config.depth_offset_cap,
                      config.depth_offset_cap)
    out = np.clip((metric + offsets) / MAX_DEPTH_METERS, 0.0, 1.0)

    dropout = rng.random(size=out.shape) < p_n
    out[(out >= 1.0) & dropout] = 0.0
    return out


def perturb_odometry(transform, p_n, rng, config=None):
    """Jitter a relative transform by Gaussian noise per degree of freedom.

    Positional offsets use sigma = p_n * 1 m on x, y, z; rotational offsets
    use sigma = p_n * 45 degrees on roll, pitch, yaw. The rotation is
    rebuilt from the jittered angles and re-orthonormalized.
    """
    config = config or NoiseConfig()
    if p_n == 0:
        return transform
    translation = (transform.translation
                   + rng.normal(0.0, p_n * config.odometry_sigma_t, size=3))
    angles = np.array(rotation_to_euler(transform.rotation))
    angles = angles + rng.normal(0.0, p_n * config.odometry_sigma_r, size=3)
    rotation = euler_to_rotation(*angles)
    u, _, vt = np.linalg.svd(rotation)
    rotation = u @ vt
    if np.linalg.det(rotation) < 0:
        u[:, -1] = -u[:, -1]
        rotation = u @ vt
    return RigidTransform(rotation, translation)
