import numpy as np
import pytest
import torch

from rgbdfill.config import ModelConfig
from rgbdfill.losses import gan_d_loss, gan_g_loss, masked_l1
from rgbdfill.models import (ContractError, CoarseGenerator,
                             DepthCompletionNet, GeneratorBundle,
                             PatchDiscriminator, RefinementNet, gate_fuse)

torch.manual_seed(0)

TINY = ModelConfig(model_scale=0.125)


@pytest.fixture(scope="module")
def nets():
    torch.manual_seed(0)
    return {
        "coarse": CoarseGenerator(TINY).eval(),
        "refine": RefinementNet(TINY).eval(),
        "depth": DepthCompletionNet(TINY).eval(),
        "disc": PatchDiscriminator(TINY).eval(),
    }


def rand_inputs(b=1, size=64):
    img = torch.rand(b, 3, size, size) * 2 - 1
    mask = (torch.rand(b, size, size) > 0.8).float()
    depth = torch.rand(b, size, size)
    return img, mask, depth


# ---------------------------------------------------------------------------
# coarse generator
# ---------------------------------------------------------------------------

def test_coarse_zero_mask_is_identity(nets):
    img, _, _ = rand_inputs()
    mask = torch.zeros(1, 64, 64)
    out = nets["coarse"](img, mask)
    assert torch.equal(out, img)


def test_coarse_full_mask_range(nets):
    img, _, _ = rand_inputs()
    mask = torch.ones(1, 64, 64)
    out = nets["coarse"](img * 0, mask)
    assert out.abs().max() <= 1.0


def test_coarse_unmasked_passthrough_bit_identical(nets):
    for _ in range(10):
        img, mask, _ = rand_inputs()
        masked = img * (1 - mask.unsqueeze(1))
        out = nets["coarse"](masked, mask)
        keep = (mask.unsqueeze(1) == 0).expand_as(img)
        assert torch.equal(out[keep], masked[keep])


def test_coarse_shape_contract_error(nets):
    with pytest.raises(ContractError):
        nets["coarse"](torch.zeros(1, 3, 64, 64), torch.zeros(1, 32, 32))


# ---------------------------------------------------------------------------
# gating fusion
# ---------------------------------------------------------------------------

def test_gate_fuse_endpoints():
    a = torch.randn(1, 8, 4, 4)
    b = torch.randn(1, 8, 4, 4)
    assert torch.equal(gate_fuse(a, b, torch.ones(1, 1, 4, 4)), a)
    assert torch.equal(gate_fuse(a, b, torch.zeros(1, 1, 4, 4)), b)


def test_gate_fuse_equal_inputs_invariant():
    a = torch.randn(1, 8, 4, 4)
    m = torch.rand(1, 1, 4, 4)
    assert torch.allclose(gate_fuse(a, a.clone(), m), a)


def test_gate_fuse_convexity():
    a = torch.randn(2, 8, 4, 4)
    b = torch.randn(2, 8, 4, 4)
    m = torch.rand(2, 1, 4, 4)
    fused = gate_fuse(a, b, m)
    lo = torch.minimum(a, b)
    hi = torch.maximum(a, b)
    assert (fused >= lo - 1e-6).all() and (fused <= hi + 1e-6).all()


def test_gate_fuse_shape_mismatch():
    with pytest.raises(ContractError):
        gate_fuse(torch.zeros(1, 8, 4, 4), torch.zeros(1, 8, 2, 2),
                  torch.zeros(1, 1, 4, 4))


# ---------------------------------------------------------------------------
# refinement net
# ---------------------------------------------------------------------------

def test_refine_first_frame_all_invalid_prev(nets):
    img, _, _ = rand_inputs()
    out, m_psi = nets["refine"](img, torch.zeros_like(img),
                                torch.zeros(1, 64, 64))
    assert out.shape == img.shape
    assert torch.isfinite(out).all()
    assert (m_psi >= 0).all() and (m_psi <= 1).all()


@pytest.mark.parametrize("size", [64, 128, 256])
def test_refine_shape_contract(nets, size):
    img = torch.rand(1, 3, size, size) * 2 - 1
    out, m_psi = nets["refine"](img, img, torch.ones(1, size, size))
    assert out.shape == img.shape
    assert m_psi.shape[-2:] == (size // 8, size // 8)


def test_refine_prev_input_gradient_flows():
    torch.manual_seed(3)
    net = RefinementNet(TINY)
    img = torch.rand(1, 3, 64, 64) * 2 - 1
    prev = (torch.rand(1, 3, 64, 64) * 2 - 1).requires_grad_(True)
    out, m_psi = net(img, prev, torch.ones(1, 64, 64))
    assert m_psi.min() < 1.0  # gate open somewhere
    out.sum().backward()
    assert prev.grad.abs().sum() > 0


def test_refine_gate_override(nets):
    img, _, _ = rand_inputs()
    out, m_psi = nets["refine"](img, img, torch.ones(1, 64, 64),
                                gate_override=1.0)
    assert (m_psi == 1.0).all()


# ---------------------------------------------------------------------------
# depth completion
# ---------------------------------------------------------------------------

def test_depth_zero_mask_passthrough(nets):
    img, _, depth = rand_inputs()
    mask = torch.zeros(1, 64, 64)
    out = nets["depth"](img, depth, mask)
    assert torch.equal(out.squeeze(1), depth)


def test_depth_masked_values_in_range(nets):
    img, _, _ = rand_inputs()
    depth = torch.full((1, 64, 64), 0.3)
    mask = torch.zeros(1, 64, 64)
    mask[:, 20:30, 20:30] = 1
    out = nets["depth"](img, depth * (1 - mask), mask)
    assert torch.isfinite(out).all()
    assert out.min() >= 0 and out.max() <= 1


def test_depth_unmasked_composition_bit_identical(nets):
    for _ in range(10):
        img, mask, depth = rand_inputs()
        masked_depth = depth * (1 - mask)
        out = nets["depth"](img, masked_depth, mask).squeeze(1)
        keep = mask == 0
        assert torch.equal(out[keep], masked_depth[keep])


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------

def test_disc_output_shape_256(nets):
    score = nets["disc"](torch.rand(1, 3, 256, 256) * 2 - 1,
                         torch.zeros(1, 256, 256))
    assert score.shape[-2:] == (4, 4)


def test_disc_finite_on_extreme_inputs(nets):
    for val in (-1.0, 1.0):
        score = nets["disc"](torch.full((1, 3, 64, 64), val),
                             torch.ones(1, 64, 64))
        assert torch.isfinite(score).all()


def power_iteration_sigma(weight, iters=200):
    """Independent power-iteration estimate of the largest singular value."""
    mat = weight.detach().reshape(weight.shape[0], -1).double().numpy()
    rng = np.random.default_rng(0)
    v = rng.normal(size=mat.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        u = mat @ v
        u /= np.linalg.norm(u)
        v = mat.T @ u
        v /= np.linalg.norm(v)
    return float(u @ mat @ v)


def test_disc_spectral_norm_bounded(nets):
    disc = nets["disc"]
    convs = [m for m in disc.net if hasattr(m, "weight")]
    assert len(convs) == 6
    for conv in convs:
        sigma = power_iteration_sigma(conv.weight)
        assert sigma <= 1.0 + 1e-3


# ---------------------------------------------------------------------------
# cross-network properties
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("size", [64, 128, 256])
def test_all_shape_contracts(nets, size):
    img = torch.rand(1, 3, size, size) * 2 - 1
    mask = torch.zeros(1, size, size)
    mask[:, : size // 4, : size // 4] = 1
    depth = torch.rand(1, size, size)

    out_c = nets["coarse"](img * (1 - mask.unsqueeze(1)), mask)
    assert out_c.shape == img.shape
    out_r, _ = nets["refine"](out_c, out_c, torch.ones(1, size, size))
    assert out_r.shape == img.shape
    out_d = nets["depth"](out_r, depth * (1 - mask), mask)
    assert out_d.shape == (1, 1, size, size)
    score = nets["disc"](out_r, mask)
    expect = size
    for _ in range(6):
        expect = (expect + 1) // 2
    assert score.shape[-2:] == (expect, expect)


def test_eval_determinism(nets):
    img, mask, depth = rand_inputs()
    masked = img * (1 - mask.unsqueeze(1))
    with torch.no_grad():
        a = nets["coarse"](masked, mask)
        b = nets["coarse"](masked, mask)
        assert torch.equal(a, b)
        r1, m1 = nets["refine"](a, a, torch.ones(1, 64, 64))
        r2, m2 = nets["refine"](a, a, torch.ones(1, 64, 64))
        assert torch.equal(r1, r2) and torch.equal(m1, m2)
        d1 = nets["depth"](r1, depth * (1 - mask), mask)
        d2 = nets["depth"](r1, depth * (1 - mask), mask)
        assert torch.equal(d1, d2)
        s1 = nets["disc"](r1, mask)
        s2 = nets["disc"](r1, mask)
        assert torch.equal(s1, s2)


def test_no_dead_parameters():
    torch.manual_seed(1)
    bundle = GeneratorBundle(TINY)
    disc = PatchDiscriminator(TINY)
    img, mask, depth = rand_inputs()
    mask = torch.clamp(mask + 0.0, 0, 1)
    mask[:, :8, :8] = 1  # guarantee a nonempty mask
    masked = img * (1 - mask.unsqueeze(1))

    coarse = bundle.coarse(masked, mask)
    refined, _ = bundle.refine(coarse, torch.rand_like(img) * 2 - 1,
                               torch.ones(1, 64, 64))
    completed = bundle.depth(refined, depth * (1 - mask), mask)
    gt = torch.rand_like(img) * 2 - 1

    loss = (masked_l1(coarse, gt, mask)
            + masked_l1(refined, gt, torch.ones_like(mask))
            + masked_l1(completed.squeeze(1), depth, mask)
            + gan_g_loss(disc(refined, mask)))
    loss.backward()
    from rgbdfill.models import count_nonzero_grads
    got, total = count_nonzero_grads(bundle)
    assert got == total, f"dead generator parameters: {total - got}"

    # The hinge loss has an exact gradient cancellation on the final bias at
    # init (both hinges active, real and fake shift identically), so audit
    # discriminator connectivity with an asymmetric functional instead.
    disc.zero_grad()
    disc(refined.detach(), mask).sum().backward()
    got, total = count_nonzero_grads(disc)
    assert got == total, f"dead discriminator parameters: {total - got}"
