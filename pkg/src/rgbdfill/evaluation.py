"""Metric suite, noise-sweep harness and gating-mask visualization.

Images are scored in the 8-bit domain; network outputs in [-1, 1] map to
levels through the affine (x + 1) * 127.5. Metrics come in two scopes:
mask-only (the inpainting task) and full-image (the translation task).
Learned-feature distances use a pluggable embedder; the shipped default is
a fixed random projection, so absolute Frechet scores are comparable only
between runs that share the embedder seed.
"""

import csv
import dataclasses
import json
import math
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import sqrtm

from .config import MAX_DEPTH_METERS, NoiseConfig
from .dataset import Frame
from .noise import perturb_depth, perturb_mask

SSIM_WINDOW = 11
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PEAK = 255.0


class EvaluationError(ValueError):
    pass


def _to_levels(image):
    """Supported image encodings to float64 8-bit levels.

    uint8 arrays are taken as levels; floating arrays are assumed to be in
    the network range [-1, 1] and map through (x + 1) * 127.5.
    """
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64)
    return (arr.astype(np.float64) + 1.0) * 127.5


def _scope(pred, gt, mask):
    pred = _to_levels(pred)
    gt = _to_levels(gt)
    if pred.shape != gt.shape:
        raise EvaluationError("image shapes differ")
    if mask is None:
        return pred.reshape(-1), gt.reshape(-1)
    mask = np.asarray(mask).astype(bool)
    if pred.ndim == 3:
        return pred[mask].reshape(-1), gt[mask].reshape(-1)
    return pred[mask], gt[mask]


def l1_distance(pred, gt, mask=None):
    """Mean absolute difference in 8-bit levels over the scoped pixels."""
    p, g = _scope(pred, gt, mask)
    if p.size == 0:
        return float("nan")
    return float(np.abs(p - g).mean())


def psnr(pred, gt, mask=None):
    """10 log10(255^2 / MSE); identical images hit the +inf sentinel."""
    p, g = _scope(pred, gt, mask)
    if p.size == 0:
        return float("nan")
    mse = float(((p - g) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK ** 2 / mse)


def _ssim_map(pred, gt):
    """Per-window SSIM over uniform 11x11 windows with stride 1."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise EvaluationError("image shapes differ")
    if min(pred.shape) < SSIM_WINDOW:
        raise EvaluationError(f"images must be at least "
                              f"{SSIM_WINDOW}x{SSIM_WINDOW}")
    wp = sliding_window_view(pred, (SSIM_WINDOW, SSIM_WINDOW))
    wg = sliding_window_view(gt, (SSIM_WINDOW, SSIM_WINDOW))
    mu_p = wp.mean(axis=(-2, -1))
    mu_g = wg.mean(axis=(-2, -1))
    var_p = wp.var(axis=(-2, -1))
    var_g = wg.var(axis=(-2, -1))
    cov = (wp * wg).mean(axis=(-2, -1)) - mu_p * mu_g
    c1 = (SSIM_K1 * PEAK) ** 2
    c2 = (SSIM_K2 * PEAK) ** 2
    return (((2 * mu_p * mu_g + c1) * (2 * cov + c2))
            / ((mu_p ** 2 + mu_g ** 2 + c1) * (var_p + var_g + c2)))


def ssim(pred, gt, mask=None):
    """Mean windowed SSIM; RGB inputs are averaged over channels.

    With a mask, only windows centered on masked pixels contribute; if no
    window center falls inside the mask the result is NaN.
    """
    pred = _to_levels(pred)
    gt = _to_levels(gt)
    if pred.ndim == 3:
        maps = [_ssim_map(pred[..., c], gt[..., c])
                for c in range(pred.shape[-1])]
        smap = np.mean(maps, axis=0)
    else:
        smap = _ssim_map(pred, gt)
    if mask is None:
        return float(smap.mean())
    half = SSIM_WINDOW // 2
    centers = np.asarray(mask).astype(bool)[half:-half, half:-half]
    if not centers.any():
        return float("nan")
    return float(smap[centers].mean())


def rmse_depth(pred, gt, mask=None):
    """Root mean squared depth error in meters over the scoped pixels."""
    pred = np.asarray(pred, dtype=np.float64) * MAX_DEPTH_METERS
    gt = np.asarray(gt, dtype=np.float64) * MAX_DEPTH_METERS
    if mask is not None:
        mask = np.asarray(mask).astype(bool)
        pred, gt = pred[mask], gt[mask]
    if pred.size == 0:
        return float("nan")
    return float(np.sqrt(((pred - gt) ** 2).mean()))


def frechet_distance(mu1, cov1, mu2, cov2):
    """||mu1 - mu2||^2 + Tr(C1 + C2 - 2 sqrt(C1 C2)) between Gaussians."""
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    cov1, cov2 = np.atleast_2d(cov1), np.atleast_2d(cov2)
    for cov in (cov1, cov2):
        if not np.allclose(cov, cov.T, atol=1e-8):
            raise EvaluationError("covariance must be symmetric")
        scale = max(1.0, float(np.abs(cov).max()))
        if np.linalg.eigvalsh(cov).min() < -1e-8 * scale:
            raise EvaluationError("covariance must be PSD")
    covmean = sqrtm(cov1 @ cov2)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(cov1 + cov2 - 2.0 * covmean))


class RandomProjectionEmbedder:
    """Fixed Gaussian projection of downsampled images to a short code."""

    def __init__(self, dim=16, input_size=16, seed=0):
        self.dim = dim
        self.input_size = input_size
        self.seed = seed
        rng = np.random.default_rng(seed)
        n_in = input_size * input_size * 3
        self.projection = rng.normal(0, 1.0 / np.sqrt(n_in), (n_in, dim))

    @property
    def name(self):
        return (f"random-projection(dim={self.dim}, "
                f"input={self.input_size}, seed={self.seed})")

    def _downsample(self, image):
        import cv2
        arr = _to_levels(image) / PEAK
        return cv2.resize(arr, (self.input_size, self.input_size),
                          interpolation=cv2.INTER_AREA)

    def embed(self, images):
        rows = [self._downsample(img).reshape(-1) for img in images]
        return np.stack(rows) @ self.projection


def embed_and_frechet(real_images, fake_images, embedder=None):
    """Frechet distance between embedded image sets.

    Returns (score, info). When a side has fewer samples than the embedding
    dimension its covariance is shrunk toward a scaled identity, which is
    flagged in the info dict.
    """
    embedder = embedder or RandomProjectionEmbedder()
    if len(real_images) < 2 or len(fake_images) < 2:
        raise EvaluationError("need at least 2 samples per side")
    stats = []
    shrunk = False
    for images in (real_images, fake_images):
        emb = embedder.embed(images)
        mu = emb.mean(axis=0)
        cov = np.cov(emb, rowvar=False)
        if len(images) < emb.shape[1]:
            shrunk = True
            alpha = 0.1
            cov = ((1 - alpha) * cov
                   + alpha * np.trace(cov) / emb.shape[1]
                   * np.eye(emb.shape[1]))
        stats.append((mu, cov))
    score = frechet_distance(stats[0][0], stats[0][1],
                             stats[1][0], stats[1][1])
    return score, {"embedder": embedder.name, "shrinkage": shrunk}


# ---------------------------------------------------------------------------
# sequence-level report
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class MetricsReport:
    """Per-metric means over a sequence, in both evaluation scopes."""
    mask_l1: float
    mask_psnr: float
    mask_ssim: float
    mask_rmse_m: float
    full_l1: float
    full_psnr: float
    full_ssim: float
    full_rmse_m: float
    frechet: float = None
    embedder: str = None
    frames: int = 0

    def to_dict(self):
        return dataclasses.asdict(self)


def _pooled_psnr(sq_sum, count):
    if count == 0:
        return float("nan")
    mse = sq_sum / count
    return math.inf if mse == 0 else 10.0 * math.log10(PEAK ** 2 / mse)


def sequence_report(pred_frames, gt_frames, masks, embedder=None):
    """Score predicted frames against ground truth.

    `masks` gives the inpainting scope per frame (normally the dynamic
    masks of the input stream). L1/PSNR/RMSE pool pixels across frames;
    SSIM averages per-frame values, skipping NaN mask-scope frames.
    """
    if not (len(pred_frames) == len(gt_frames) == len(masks)):
        raise EvaluationError("frame count mismatch")
    if not pred_frames:
        raise EvaluationError("empty sequence")

    acc = {s: {"abs": 0.0, "sq": 0.0, "n": 0, "dsq": 0.0, "dn": 0}
           for s in ("mask", "full")}
    ssims = {"mask": [], "full": []}
    for pred, gt, mask in zip(pred_frames, gt_frames, masks):
        p = _to_levels(pred.rgb)
        g = _to_levels(gt.rgb)
        scoped = {"mask": np.asarray(mask).astype(bool), "full": None}
        for scope, m in scoped.items():
            if m is None:
                dp, dg = p.reshape(-1), g.reshape(-1)
                zp = pred.depth.reshape(-1)
                zg = gt.depth.reshape(-1)
            else:
                dp, dg = p[m].reshape(-1), g[m].reshape(-1)
                zp, zg = pred.depth[m], gt.depth[m]
            acc[scope]["abs"] += float(np.abs(dp - dg).sum())
            acc[scope]["sq"] += float(((dp - dg) ** 2).sum())
            acc[scope]["n"] += dp.size
            dz = (zp.astype(np.float64) - zg.astype(np.float64)) \
                * MAX_DEPTH_METERS
            acc[scope]["dsq"] += float((dz ** 2).sum())
            acc[scope]["dn"] += dz.size
        ssims["full"].append(ssim(pred.rgb, gt.rgb))
        val = ssim(pred.rgb, gt.rgb, mask)
        if not math.isnan(val):
            ssims["mask"].append(val)

    def summarize(scope):
        a = acc[scope]
        l1 = a["abs"] / a["n"] if a["n"] else float("nan")
        rmse = (math.sqrt(a["dsq"] / a["dn"])
                if a["dn"] else float("nan"))
        s = (float(np.mean(ssims[scope]))
             if ssims[scope] else float("nan"))
        return l1, _pooled_psnr(a["sq"], a["n"]), s, rmse

    mask_stats = summarize("mask")
    full_stats = summarize("full")
    frechet = None
    name = None
    if len(pred_frames) >= 2:
        frechet, info = embed_and_frechet(
            [f.rgb for f in gt_frames], [f.rgb for f in pred_frames],
            embedder)
        name = info["embedder"]
    return MetricsReport(*mask_stats, *full_stats, frechet=frechet,
                         embedder=name, frames=len(pred_frames))


# ---------------------------------------------------------------------------
# noise sweep
# ---------------------------------------------------------------------------

SWEEP_TARGETS = ("mask", "depth", "odometry")


def _corrupt_frames(frames, which, p_n, rng, config):
    out = []
    for f in frames:
        mask, depth = f.mask, f.depth
        if which == "mask":
            mask = perturb_mask(f.mask, p_n, rng, config)
        elif which == "depth":
            depth = perturb_depth(f.depth, f.semantic, p_n, rng,
                                  config).astype(np.float32)
        out.append(Frame(rgb=f.rgb, depth=depth, semantic=f.semantic,
                         mask=mask, pose=f.pose,
                         timestamp_index=f.timestamp_index))
    return out


def noise_sweep(bundle, pair, grid, which, seed=0, config=None,
                embedder=None):
    """Evaluate one corrupted input channel over a grid of noise scales.

    Returns one row per grid point; metrics always use the clean masks and
    ground-truth statics, so rows are comparable. At p_n = 0 the inputs
    pass through untouched, making the first row the clean baseline.
    """
    from .dataset import SequencePair
    from .pipeline import NoisyOdometry, run_stream

    if which not in SWEEP_TARGETS:
        raise EvaluationError(f"unknown sweep target: {which}")
    config = config or NoiseConfig()
    rows = []
    for p_n in grid:
        rng = np.random.default_rng(seed)
        odometry = None
        frames = pair.dynamic_frames
        if p_n > 0:
            if which == "odometry":
                odometry = NoisyOdometry(p_n, rng, config)
            else:
                frames = _corrupt_frames(pair.dynamic_frames, which,
                                         p_n, rng, config)
        noisy_pair = SequencePair(
            dynamic_frames=frames, static_frames=pair.static_frames,
            camera=pair.camera, mount_translation=pair.mount_translation,
            dynamic_ids=pair.dynamic_ids, fov_degrees=pair.fov_degrees)
        out_pair, _ = run_stream(noisy_pair, bundle, odometry=odometry)
        report = sequence_report(out_pair.static_frames,
                                 pair.static_frames,
                                 [f.mask for f in pair.dynamic_frames],
                                 embedder)
        row = {"which": which, "p_n": float(p_n)}
        row.update(report.to_dict())
        rows.append(row)
    return rows


def write_sweep_report(rows, out_dir, stem="sweep"):
    """Persist sweep rows as CSV + JSON and render an SVG line chart."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not rows:
        raise EvaluationError("no sweep rows to write")

    csv_path = out_dir / f"{stem}.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    json_path = out_dir / f"{stem}.json"
    json_path.write_text(json.dumps(rows, indent=2))

    svg_path = out_dir / f"{stem}.svg"
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    xs = [r["p_n"] for r in rows]
    for ax, metric, label in zip(axes, ("full_l1", "frechet"),
                                 ("full-image L1 [levels]",
                                  "Frechet distance")):
        ys = [r[metric] for r in rows]
        if all(y is None for y in ys):
            continue
        ax.plot(xs, ys, marker="o")
        ax.set_xlabel("$p_n$")
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
    fig.suptitle(f"{rows[0]['which']} noise sweep")
    fig.tight_layout()
    fig.savefig(svg_path, format="svg")
    plt.close(fig)
    return {"csv": csv_path, "json": json_path, "svg": svg_path}


# ---------------------------------------------------------------------------
# gating-mask visualization
# ---------------------------------------------------------------------------

def _lanczos_kernel(x, a):
    x = np.asarray(x, dtype=np.float64)
    out = np.sinc(x) * np.sinc(x / a)
    return np.where(np.abs(x) < a, out, 0.0)


def lanczos_upsample(array, out_h, out_w, a=4):
    """Separable Lanczos resampling with per-tap weight normalization.

    Normalizing each output pixel's weights to sum to one makes constant
    inputs reproduce exactly.
    """
    def resample_axis(arr, out_len):
        in_len = arr.shape[0]
        scale = in_len / out_len
        coords = (np.arange(out_len) + 0.5) * scale - 0.5
        base = np.floor(coords).astype(np.int64)
        taps = np.arange(-a + 1, a + 1)
        idx = base[:, None] + taps[None, :]
        weights = _lanczos_kernel(coords[:, None] - idx, a)
        weights /= weights.sum(axis=1, keepdims=True)
        idx = np.clip(idx, 0, in_len - 1)
        return np.einsum("ot,ot...->o...", weights, arr[idx])

    out = resample_axis(np.asarray(array, dtype=np.float64), out_h)
    out = np.moveaxis(resample_axis(np.moveaxis(out, 1, 0), out_w), 0, 1)
    return out


def export_gating_visualization(frame, result, path):
    """Render the six-panel inspection figure for one pipeline step.

    Columns: input image, input depth, coarse output, jet-colorized gating
    mask (red = current-frame features, blue = previous-frame features),
    refined output, completed depth.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    h, w = frame.depth.shape
    gate = np.clip(lanczos_upsample(result.gating_mask, h, w), 0.0, 1.0)
    panels = [
        (frame.rgb, None, "$I_t$"),
        (frame.depth, "viridis", "$D_t$"),
        (result.coarse_rgb, None, "coarse"),
        (gate, "jet", r"$M_\Psi$"),
        (result.refined_rgb, None, "refined"),
        (result.completed_depth, "viridis", "completed depth"),
    ]
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3))
    for ax, (img, cmap, title) in zip(axes, panels):
        if cmap is None:
            ax.imshow(img)
        else:
            ax.imshow(img, cmap=cmap, vmin=0.0, vmax=1.0)
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path
