import math

import numpy as np
import pytest
import torch

from rgbdfill.config import LossWeights
from rgbdfill.losses import (LossContractError, RandomPyramidBackbone,
                             TERM_ORDER, TrainingAbort, gan_d_loss,
                             gan_g_loss, gram, masked_l1, perceptual_loss,
                             smoothness_loss, style_loss, total_loss)

torch.manual_seed(0)


def masked_l1_oracle(pred, target, mask):
    """Plain-Python sum over masked pixels, all channels."""
    pred = pred.detach().numpy()
    target = target.detach().numpy()
    mask = mask.detach().numpy()
    total = 0.0
    count = 0
    b, c, h, w = pred.shape
    for i in range(b):
        for y in range(h):
            for x in range(w):
                if mask[i, y, x] > 0:
                    for ch in range(c):
                        total += abs(pred[i, ch, y, x] - target[i, ch, y, x])
                        count += 1
    return total / count if count else 0.0


def gram_oracle(feat):
    """Brute-force Gram matrix for a single (C, H, W) feature map."""
    feat = feat.detach().numpy()
    c, h, w = feat.shape
    out = np.zeros((c, c))
    for i in range(c):
        for j in range(c):
            out[i, j] = (feat[i] * feat[j]).sum()
    return out / (c * h * w)


# ---------------------------------------------------------------------------
# masked L1
# ---------------------------------------------------------------------------

def test_masked_l1_matches_oracle():
    torch.manual_seed(1)
    for _ in range(5):
        pred = torch.rand(2, 3, 6, 6)
        target = torch.rand(2, 3, 6, 6)
        mask = (torch.rand(2, 6, 6) > 0.5).float()
        got = masked_l1(pred, target, mask).item()
        assert got == pytest.approx(masked_l1_oracle(pred, target, mask),
                                    rel=1e-6)


def test_masked_l1_empty_mask_is_zero():
    pred = torch.rand(1, 3, 4, 4)
    val = masked_l1(pred, pred + 1, torch.zeros(1, 4, 4))
    assert val.item() == 0.0


def test_masked_l1_constant_offset():
    pred = torch.zeros(1, 3, 4, 4)
    target = torch.full((1, 3, 4, 4), 0.25)
    mask = torch.ones(1, 4, 4)
    assert masked_l1(pred, target, mask).item() == pytest.approx(0.25)


def test_masked_l1_gradcheck():
    pred = torch.rand(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
    target = torch.rand(1, 2, 4, 4, dtype=torch.float64)
    mask = torch.ones(1, 4, 4, dtype=torch.float64)
    assert torch.autograd.gradcheck(
        lambda p: masked_l1(p, target, mask), (pred,), eps=1e-6, atol=1e-6)


# ---------------------------------------------------------------------------
# gram / style
# ---------------------------------------------------------------------------

def test_gram_matches_bruteforce_oracle():
    torch.manual_seed(2)
    feat = torch.rand(5, 7, 3)
    got = gram(feat).numpy()
    np.testing.assert_allclose(got, gram_oracle(feat), rtol=1e-5)


def test_gram_symmetric_psd():
    feat = torch.randn(4, 8, 8)
    g = gram(feat).double().numpy()
    np.testing.assert_allclose(g, g.T, atol=1e-7)
    assert np.linalg.eigvalsh(g).min() >= -1e-7


def test_style_loss_identical_images_zero():
    bb = RandomPyramidBackbone(seed=0)
    img = torch.rand(1, 3, 32, 32) * 2 - 1
    assert style_loss(img, img.clone(), bb).item() == 0.0


def test_style_loss_positive_for_texture_change():
    bb = RandomPyramidBackbone(seed=0)
    img = torch.rand(1, 3, 32, 32) * 2 - 1
    assert style_loss(img, img.flip(-1) * 0.5, bb).item() > 0.0


def test_style_loss_gradient_reaches_input():
    bb = RandomPyramidBackbone(seed=0)
    img = (torch.rand(1, 3, 32, 32) * 2 - 1).requires_grad_(True)
    ref = torch.rand(1, 3, 32, 32) * 2 - 1
    style_loss(img, ref, bb).backward()
    assert img.grad.abs().sum() > 0


# ---------------------------------------------------------------------------
# perceptual backbone
# ---------------------------------------------------------------------------

def test_backbone_deterministic_across_instances():
    a = RandomPyramidBackbone(seed=7)
    b = RandomPyramidBackbone(seed=7)
    img = torch.rand(1, 3, 32, 32) * 2 - 1
    for fa, fb in zip(a.features(img), b.features(img)):
        assert torch.equal(fa, fb)


def test_backbone_seed_changes_features():
    a = RandomPyramidBackbone(seed=7)
    b = RandomPyramidBackbone(seed=8)
    img = torch.rand(1, 3, 32, 32) * 2 - 1
    assert not torch.equal(a.features(img)[0], b.features(img)[0])


def test_backbone_is_frozen():
    bb = RandomPyramidBackbone(seed=0)
    assert all(not p.requires_grad for p in bb.parameters())
    assert bb.tap_count == 3


def test_perceptual_loss_zero_for_identical_and_positive_otherwise():
    bb = RandomPyramidBackbone(seed=0)
    img = torch.rand(1, 3, 32, 32) * 2 - 1
    assert perceptual_loss(img, img.clone(), bb).item() == 0.0
    assert perceptual_loss(img, img * 0.9, bb).item() > 0.0


def test_perceptual_loss_gradient_reaches_input():
    bb = RandomPyramidBackbone(seed=0)
    img = (torch.rand(1, 3, 32, 32) * 2 - 1).requires_grad_(True)
    ref = torch.rand(1, 3, 32, 32) * 2 - 1
    perceptual_loss(img, ref, bb).backward()
    assert img.grad.abs().sum() > 0


# ---------------------------------------------------------------------------
# hinge GAN losses
# ---------------------------------------------------------------------------

def test_gan_d_loss_ideal_scores_zero():
    real = torch.ones(2, 1, 4, 4)
    fake = -torch.ones(2, 1, 4, 4)
    assert gan_d_loss(real, fake).item() == 0.0


def test_gan_d_loss_hand_value():
    # real = 0 gives relu(1 - 0) = 1; fake = 0 gives relu(1 + 0) = 1
    z = torch.zeros(1, 1, 2, 2)
    assert gan_d_loss(z, z).item() == pytest.approx(2.0)


def test_gan_g_loss_is_negated_mean():
    fake = torch.tensor([[1.0, -3.0], [2.0, 4.0]]).reshape(1, 1, 2, 2)
    assert gan_g_loss(fake).item() == pytest.approx(-1.0)


def test_gan_losses_gradcheck():
    fake = torch.randn(1, 1, 3, 3, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(gan_g_loss, (fake,), eps=1e-6, atol=1e-6)
    real = torch.randn(1, 1, 3, 3, dtype=torch.float64) + 3  # keep off hinge
    fake2 = (torch.randn(1, 1, 3, 3, dtype=torch.float64) + 3
             ).requires_grad_(True)
    assert torch.autograd.gradcheck(
        lambda f: gan_d_loss(real, f), (fake2,), eps=1e-6, atol=1e-6)


# ---------------------------------------------------------------------------
# depth smoothness
# ---------------------------------------------------------------------------

def test_smoothness_affine_plane_is_zero():
    y, x = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    plane = torch.tensor(0.3 * x + 0.1 * y + 2.0, dtype=torch.float32)
    assert smoothness_loss(plane).item() == pytest.approx(0.0, abs=1e-5)


def test_smoothness_impulse_hand_value():
    # 5x5 grid with a unit impulse at the center. Interior stencil values:
    # center |4 * 1| = 4, each 4-neighbor |0 - 1| = 1, others 0.
    # Mean over the 3x3 interior: (4 + 4 * 1) / 9.
    d = torch.zeros(5, 5)
    d[2, 2] = 1.0
    assert smoothness_loss(d).item() == pytest.approx(8.0 / 9.0)


def test_smoothness_batched_matches_loop():
    torch.manual_seed(4)
    batch = torch.rand(3, 6, 6)
    per = torch.stack([smoothness_loss(batch[i]) for i in range(3)])
    assert smoothness_loss(batch).item() == pytest.approx(
        per.mean().item(), rel=1e-6)


def test_smoothness_rejects_tiny_input():
    with pytest.raises(LossContractError):
        smoothness_loss(torch.zeros(2, 2))


def test_smoothness_gradcheck():
    d = torch.rand(5, 5, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(smoothness_loss, (d,),
                                    eps=1e-6, atol=1e-6)


# ---------------------------------------------------------------------------
# weighted total
# ---------------------------------------------------------------------------

def test_total_loss_default_weights_sum():
    comps = {name: torch.tensor(1.0) for name in TERM_ORDER}
    total, breakdown = total_loss(comps, LossWeights())
    assert total.item() == pytest.approx(3.611)
    assert set(breakdown) == set(TERM_ORDER) | {"total"}
    assert breakdown["total"] == pytest.approx(3.611)


def test_total_loss_partial_components():
    comps = {"coarse_l1": torch.tensor(2.0)}
    total, breakdown = total_loss(comps, LossWeights())
    assert total.item() == pytest.approx(2.0)
    assert list(breakdown) == ["coarse_l1", "total"]


def test_total_loss_rejects_unknown_term():
    with pytest.raises(LossContractError):
        total_loss({"bogus": torch.tensor(1.0)}, LossWeights())


def test_total_loss_aborts_on_nonfinite():
    comps = {"coarse_l1": torch.tensor(float("nan"))}
    with pytest.raises(TrainingAbort, match="coarse_l1"):
        total_loss(comps, LossWeights())


def test_total_loss_gradient_flows_through_every_term():
    leaves = {name: torch.tensor(1.0, requires_grad=True)
              for name in TERM_ORDER}
    total, _ = total_loss(dict(leaves), LossWeights())
    total.backward()
    weights = LossWeights()
    expect = {
        "coarse_l1": 1.0,
        "image_l1": weights.image_l1,
        "image_perceptual": weights.image_perceptual,
        "image_style": weights.image_style,
        "image_gan": weights.image_gan,
        "depth_l1": weights.depth_l1,
        "depth_smooth": weights.depth_smooth,
    }
    for name, leaf in leaves.items():
        assert leaf.grad.item() == pytest.approx(expect[name]), name
