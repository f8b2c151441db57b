"""The four trainable networks.

Coarse inpainting generator, refinement network with gated recurrent
fusion, depth completion network and a spectrally normalized patch
discriminator. Widths are controlled by ModelConfig.model_scale so the
full-size topology stays constructible while the default is desk scale.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import parametrize

from .config import ModelConfig


class ContractError(ValueError):
    pass


def _check_same_shape(*tensors):
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise ContractError(f"shape mismatch: {sorted(shapes)}")


class PreActResidualBlock(nn.Module):
    """Pre-activation residual unit (norm -> relu -> conv, twice)."""

    def __init__(self, channels):
        super().__init__()
        self.norm1 = nn.GroupNorm(1, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(1, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.relu(self.norm1(x)))
        h = self.conv2(F.relu(self.norm2(h)))
        return x + h


class ResidualEncoder(nn.Module):
    """Stem + 3 stride-2 stages of pre-activation blocks; output at 1/8."""

    def __init__(self, in_channels, base, blocks_per_stage=2,
                 keep_taps=False):
        super().__init__()
        self.keep_taps = keep_taps
        self.stem = nn.Conv2d(in_channels, base, 3, padding=1)
        stages = []
        ch = base
        for _ in range(3):
            stage = [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1)]
            stage += [PreActResidualBlock(ch * 2)
                      for _ in range(blocks_per_stage)]
            stages.append(nn.Sequential(*stage))
            ch *= 2
        self.stages = nn.ModuleList(stages)
        self.out_channels = ch

    def forward(self, x):
        taps = []
        h = self.stem(x)
        taps.append(h)
        for stage in self.stages:
            h = stage(h)
            taps.append(h)
        if self.keep_taps:
            return h, taps
        return h


class UpsampleDecoder(nn.Module):
    """3 stages of x2 bilinear upsampling + 3x3 conv halving channels.

    With skips=True the decoder also fuses encoder taps through 1x1 convs,
    which is what lets the generators reproduce high-frequency content.
    """

    def __init__(self, in_channels, out_channels, final_activation,
                 skips=False):
        super().__init__()
        convs, fuses = [], []
        ch = in_channels
        for _ in range(3):
            convs.append(nn.Conv2d(ch, ch // 2, 3, padding=1))
            ch //= 2
            if skips:
                fuses.append(nn.Conv2d(ch, ch, 1))
        self.convs = nn.ModuleList(convs)
        self.fuses = nn.ModuleList(fuses) if skips else None
        self.head = nn.Conv2d(ch, out_channels, 1)
        self.final_activation = final_activation

    def forward(self, x, taps=None):
        if (self.fuses is not None) != (taps is not None):
            raise ContractError("decoder skips and taps must match")
        h = x
        for i, conv in enumerate(self.convs):
            h = F.interpolate(h, scale_factor=2, mode="bilinear",
                              align_corners=False)
            h = F.relu(conv(h))
            if self.fuses is not None:
                # taps: [stem, s1, s2, bottom]; consume in reverse order
                h = F.relu(h + self.fuses[i](taps[2 - i]))
        return self.final_activation(self.head(h))


class CoarseGenerator(nn.Module):
    """Fills masked regions from spatial context; hard pass-through outside."""

    def __init__(self, config=None):
        super().__init__()
        config = config or ModelConfig()
        base = config.width
        self.encoder = SkipEncoder(4, base, config.coarse_blocks_per_stage)
        self.decoder = UpsampleDecoder(self.encoder.out_channels, 3,
                                       torch.tanh, skips=True)

    def forward(self, masked_image, mask):
        """masked_image: B x 3 x H x W already zeroed inside the mask.

        Returns the composited image: unmasked pixels are the input verbatim,
        masked pixels come from the network.
        """
        if masked_image.dim() != 4 or masked_image.shape[1] != 3:
            raise ContractError("masked_image must be B x 3 x H x W")
        if mask.shape[0] != masked_image.shape[0] or \
                mask.shape[-2:] != masked_image.shape[-2:]:
            raise ContractError("mask spatial dims must match image")
        mask = mask.reshape(mask.shape[0], 1, *mask.shape[-2:])
        h, taps = self.encoder(torch.cat([masked_image, mask], dim=1))
        raw = self.decoder(h, taps)
        return torch.where(mask > 0, raw, masked_image)


def gate_fuse(psi_t, psi_prev, m_psi):
    """Convex per-location fusion: m*psi_t + (1-m)*psi_prev.

    m_psi is B x 1 x h x w in [0, 1], broadcast over channels.
    """
    _check_same_shape(psi_t, psi_prev)
    if m_psi.shape[-2:] != psi_t.shape[-2:]:
        raise ContractError("gating mask spatial dims must match features")
    return m_psi * psi_t + (1.0 - m_psi) * psi_prev


class GatingModule(nn.Module):
    """Five 3x3 convs halving channels, then 1x1 to a single channel.

    The logistic squashing guarantees the mask lives in [0, 1] so the fusion
    is a convex combination.
    """

    def __init__(self, in_channels):
        super().__init__()
        layers = []
        ch = in_channels
        for _ in range(5):
            nxt = max(1, ch // 2)
            layers += [nn.Conv2d(ch, nxt, 3, padding=1), nn.ReLU()]
            ch = nxt
        layers.append(nn.Conv2d(ch, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return torch.sigmoid(self.net(x))


class RefinementNet(nn.Module):
    """Whole-image translation combining current and warped-previous context.

    Two encoders of identical topology feed a learned gate that fuses their
    feature maps at 1/8 resolution; the fused map is decoded to the refined
    image. The previous-frame encoder additionally receives the warp
    visibility channel (holes are zero-filled).
    """

    def __init__(self, config=None):
        super().__init__()
        config = config or ModelConfig()
        base = config.width
        self.encoder_t = SkipEncoder(3, base, config.coarse_blocks_per_stage)
        self.encoder_prev = SkipEncoder(4, base,
                                        config.coarse_blocks_per_stage)
        feat = self.encoder_t.out_channels
        self.gating = GatingModule(feat * 2)
        # skip taps are gated the same way as the bottleneck, so the
        # temporal feedback shapes the output at every scale
        self.decoder = UpsampleDecoder(feat, 3, torch.tanh, skips=True)

    def forward(self, coarse, warped_prev, visibility, gate_override=None):
        """Returns (refined image in [-1,1], gating mask at 1/8 resolution).

        gate_override, if given, replaces the learned mask with a constant
        (used by ablations that disable the recurrent feedback).
        """
        _check_same_shape(coarse, warped_prev)
        if visibility.shape[-2:] != coarse.shape[-2:]:
            raise ContractError("visibility spatial dims must match image")
        vis = visibility.reshape(visibility.shape[0], 1,
                                 *visibility.shape[-2:])
        psi_t, taps_t = self.encoder_t(coarse)
        psi_prev, taps_prev = self.encoder_prev(
            torch.cat([warped_prev, vis], dim=1))
        if gate_override is None:
            m_psi = self.gating(torch.cat([psi_t, psi_prev], dim=1))
        else:
            m_psi = torch.full_like(psi_t[:, :1], float(gate_override))
        fused = gate_fuse(psi_t, psi_prev, m_psi)
        taps = []
        for tap_t, tap_prev in zip(taps_t, taps_prev):
            m = F.interpolate(m_psi, size=tap_t.shape[-2:], mode="bilinear",
                              align_corners=False)
            taps.append(gate_fuse(tap_t, tap_prev, m))
        return self.decoder(fused, taps), m_psi


class SkipEncoder(nn.Module):
    """Residual encoder exposing per-stage taps for skip connections."""

    def __init__(self, in_channels, base, blocks_per_stage=1):
        super().__init__()
        self.inner = ResidualEncoder(in_channels, base, blocks_per_stage,
                                     keep_taps=True)
        self.out_channels = self.inner.out_channels

    def forward(self, x):
        return self.inner(x)


class DepthCompletionNet(nn.Module):
    """Regresses depth in masked regions, conditioned on the refined image."""

    def __init__(self, config=None):
        super().__init__()
        config = config or ModelConfig()
        base = config.width
        self.encoder = SkipEncoder(5, base, config.depth_blocks_per_stage)
        ch = self.encoder.out_channels
        ups, fuses = [], []
        for _ in range(3):
            ups.append(nn.ConvTranspose2d(ch, ch // 2, 3, stride=2,
                                          padding=1, output_padding=1))
            ch //= 2
            fuses.append(nn.Conv2d(ch, ch, 1))
        self.ups = nn.ModuleList(ups)
        self.fuses = nn.ModuleList(fuses)
        self.head = nn.Conv2d(ch, 1, 1)

    def forward(self, refined, masked_depth, mask):
        """masked_depth: depth with masked pixels zeroed; output composited so
        unmasked pixels pass through the input depth verbatim."""
        if refined.dim() != 4 or refined.shape[1] != 3:
            raise ContractError("refined must be B x 3 x H x W")
        if masked_depth.shape[-2:] != refined.shape[-2:]:
            raise ContractError("depth spatial dims must match image")
        d = masked_depth.reshape(masked_depth.shape[0], 1,
                                 *masked_depth.shape[-2:])
        m = mask.reshape(mask.shape[0], 1, *mask.shape[-2:])
        h, taps = self.encoder(torch.cat([refined, d, m], dim=1))
        # taps: [stem, s1, s2, s3]; fuse in reverse order while upsampling
        for i, (up, fuse) in enumerate(zip(self.ups, self.fuses)):
            h = F.relu(up(h))
            h = F.relu(h + fuse(taps[2 - i]))
        raw = torch.sigmoid(self.head(h))
        return torch.where(m > 0, raw, d)


class _SpectralWeightNorm(nn.Module):
    """Divides the weight by its exact largest singular value.

    Exact SVD (rather than a running power iteration) keeps the constraint
    tight in both train and eval modes at desk-scale widths.
    """

    def forward(self, weight):
        mat = weight.flatten(1)
        sigma = torch.linalg.matrix_norm(mat, ord=2)
        return weight / sigma.clamp_min(1e-12)


def spectral_norm_conv(conv):
    parametrize.register_parametrization(conv, "weight",
                                         _SpectralWeightNorm())
    return conv


class PatchDiscriminator(nn.Module):
    """Six stride-2 convolutions (kernel 5) with spectral normalization.

    Input is an image concatenated with the target-region mask (4 channels);
    the output is a real-valued patch score map with no global pooling.
    """

    def __init__(self, config=None):
        super().__init__()
        config = config or ModelConfig()
        base = config.disc_width
        channels = [4, base, base * 2, base * 4, base * 4, base * 4, base * 4]
        layers = []
        for cin, cout in zip(channels[:-1], channels[1:]):
            layers.append(spectral_norm_conv(
                nn.Conv2d(cin, cout, 5, stride=2, padding=2)))
            layers.append(nn.LeakyReLU(0.2))
        # the last activation is dropped: scores are unbounded reals
        self.net = nn.Sequential(*layers[:-1])

    def forward(self, image, mask):
        if image.dim() != 4 or image.shape[1] != 3:
            raise ContractError("image must be B x 3 x H x W")
        m = mask.reshape(mask.shape[0], 1, *mask.shape[-2:])
        if m.shape[-2:] != image.shape[-2:]:
            raise ContractError("mask spatial dims must match image")
        return self.net(torch.cat([image, m], dim=1))


class GeneratorBundle(nn.Module):
    """The three generator-side networks, addressed as one module."""

    def __init__(self, config=None):
        super().__init__()
        self.config = config or ModelConfig()
        self.coarse = CoarseGenerator(self.config)
        self.refine = RefinementNet(self.config)
        self.depth = DepthCompletionNet(self.config)


def count_nonzero_grads(module):
    total = with_grad = 0
    for p in module.parameters():
        total += 1
        if p.grad is not None and p.grad.abs().sum() > 0:
            with_grad += 1
    return with_grad, total
