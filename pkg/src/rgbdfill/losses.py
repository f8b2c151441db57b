"""Training objectives.

All norms use the per-element mean convention so that the weighting
factors stay resolution independent.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import LossWeights


class LossContractError(ValueError):
    pass


class TrainingAbort(RuntimeError):
    """Raised when a loss term becomes non-finite; names the offending term."""


def masked_l1(pred, gt, mask):
    """Mean absolute difference over masked elements; 0 for an empty mask.

    mask is broadcast over channel dimensions.
    """
    if pred.shape != gt.shape:
        raise LossContractError("pred/gt shape mismatch")
    if mask.shape[-2:] != pred.shape[-2:]:
        raise LossContractError("mask spatial dims must match pred")
    while mask.dim() < pred.dim():
        mask = mask.unsqueeze(-3)
    mask = mask.to(pred.dtype)
    weight = mask.expand_as(pred)
    denom = weight.sum()
    if denom == 0:
        return pred.new_zeros(())
    return (weight * (pred - gt).abs()).sum() / denom


class RandomPyramidBackbone(nn.Module):
    """Frozen random convolutional pyramid used as the default feature
    extractor for the perceptual and style terms.

    Three stride-2 taps; weights drawn once from a recorded seed, so two
    calls on identical inputs always return identical features. Expects
    images in [-1, 1]. A pretrained VGG-16 can be dropped in behind the same
    `features()` interface when its weights are available locally.
    """

    def __init__(self, seed=1234, channels=(16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        cin = 3
        for cout in channels:
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape,
                                              generator=gen) * 0.2)
                conv.bias.zero_()
            convs.append(conv)
            cin = cout
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def tap_count(self):
        return len(self.convs)

    def features(self, images):
        """images in [-1, 1]. Returns a list of three feature maps."""
        taps = []
        h = images
        for conv in self.convs:
            h = F.relu(conv(h.to(conv.weight.dtype)))
            taps.append(h)
        return taps


def perceptual_loss(pred, gt, backbone):
    """Sum over taps of the mean absolute feature difference."""
    feats_p = backbone.features(pred)
    feats_g = backbone.features(gt)
    total = pred.new_zeros(())
    for fp, fg in zip(feats_p, feats_g):
        total = total + (fp - fg).abs().mean()
    return total


def gram(features):
    """Channel Gram matrix G = F F^T / (C*H*W); accepts (C,H,W) or (B,C,H,W)."""
    squeeze = features.dim() == 3
    if squeeze:
        features = features.unsqueeze(0)
    b, c, h, w = features.shape
    flat = features.reshape(b, c, h * w)
    g = flat @ flat.transpose(1, 2) / (c * h * w)
    return g[0] if squeeze else g


def style_loss(pred, gt, backbone):
    """Sum over taps of the mean absolute Gram-matrix difference."""
    feats_p = backbone.features(pred)
    feats_g = backbone.features(gt)
    total = pred.new_zeros(())
    for fp, fg in zip(feats_p, feats_g):
        total = total + (gram(fp) - gram(fg)).abs().mean()
    return total


def gan_g_loss(fake_scores):
    """Generator hinge objective: negative mean of fake patch scores."""
    return -fake_scores.mean()


def gan_d_loss(real_scores, fake_scores):
    """Discriminator hinge objective on the patch score maps."""
    if real_scores.shape != fake_scores.shape:
        raise LossContractError("score map shape mismatch")
    return (F.relu(1.0 - real_scores).mean()
            + F.relu(1.0 + fake_scores).mean())


def smoothness_loss(depth):
    """Mean |discrete Laplacian| of the depth map, interior pixels only.

    5-point stencil: 4*d(u,v) minus the 4-neighborhood sum; no padding.
    Accepts (H,W), (B,H,W) or (B,1,H,W).
    """
    if depth.dim() == 2:
        depth = depth.unsqueeze(0)
    if depth.dim() == 4:
        depth = depth.squeeze(1)
    h, w = depth.shape[-2:]
    if h < 3 or w < 3:
        raise LossContractError("smoothness_loss needs at least a 3x3 map")
    center = depth[..., 1:-1, 1:-1]
    lap = (4.0 * center
           - depth[..., :-2, 1:-1] - depth[..., 2:, 1:-1]
           - depth[..., 1:-1, :-2] - depth[..., 1:-1, 2:])
    return lap.abs().mean()


TERM_ORDER = ("coarse_l1", "image_l1", "image_perceptual", "image_style",
              "image_gan", "depth_l1", "depth_smooth")


def total_loss(components, weights=None):
    """Weighted sum of the named loss terms.

    `components` maps term names (TERM_ORDER) to scalars; missing terms count
    as zero. The coarse term is unweighted. Returns (total, breakdown) where
    breakdown holds the raw per-term floats.
    """
    weights = weights or LossWeights()
    weight_map = {
        "coarse_l1": 1.0,
        "image_l1": weights.image_l1,
        "image_perceptual": weights.image_perceptual,
        "image_style": weights.image_style,
        "image_gan": weights.image_gan,
        "depth_l1": weights.depth_l1,
        "depth_smooth": weights.depth_smooth,
    }
    unknown = set(components) - set(weight_map)
    if unknown:
        raise LossContractError(f"unknown loss terms: {sorted(unknown)}")
    total = None
    breakdown = {}
    for name in TERM_ORDER:
        if name not in components:
            continue
        value = components[name]
        scalar = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not torch.isfinite(torch.as_tensor(scalar)):
            raise TrainingAbort(f"non-finite loss term: {name}")
        breakdown[name] = scalar
        term = weight_map[name] * value
        total = term if total is None else total + term
    if total is None:
        total = torch.zeros(())
    breakdown["total"] = float(total.detach())
    return total, breakdown
