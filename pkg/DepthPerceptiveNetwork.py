"""
Depth perceptive network: a light FPN-style encoder/decoder over the silhouette stack.

It produces the depth-perception guidance (one map per joint and view, at S x S) and a fake
frontal depth map. Only training uses it; inference never builds or loads it.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
from torch import nn

from DomainTypes import (ConfigException, DepthPerception, DpLevels, SilhouetteStack,
                         TrainConfig, guidance_scale)
from NetworkBlocks import ConvBlock, check_input, guidance_channels, init_weights, resize, stack_tensor

ENCODER_WIDTHS = (32, 64, 128)

# Indices into DpnOutput.level_phi, coarsest first.
LEVELS_BY_VARIANT = {
    DpLevels.HDP: (0, 1),
    DpLevels.FDP: (0, 1, 2),
}


class UpStage(nn.Module):
    """3x3 deconvolution, batch normalization, ReLU, then a 3x3 convolution merged with the lateral skip."""

    def __init__(self, num_in: int, num_skip: int, num_out: int):
        super().__init__()
        self.up = nn.Sequential(
            nn.ConvTranspose2d(num_in, num_out, 3, stride=2, padding=1, output_padding=1, bias=False),
            nn.BatchNorm2d(num_out),
            nn.ReLU(inplace=True),
        )
        self.conv = nn.Conv2d(num_out, num_out, 3, padding=1)
        self.lateral = nn.Conv2d(num_skip, num_out, 1)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x, skip):
        return self.relu(self.conv(self.up(x)) + self.lateral(skip))


@dataclass
class DpnOutput:
    """
    Batched network output.

    level_phi: per-level transformed features at S x S, (B, J*V, S, S) each, ordered 1/8, 1/4, 1/2.
    fake_depth: (B, 1, 128, 128) in [0, 1].
    per_level_features: decoder feature maps at 1/8, 1/4, 1/2.
    """
    level_phi: Tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    fake_depth: torch.Tensor
    per_level_features: Tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    view_count: int

    @property
    def phi_dp(self) -> torch.Tensor:
        return self.level_phi[0] + self.level_phi[1] + self.level_phi[2]

    def perception(self, index: int = 0) -> DepthPerception:
        return DepthPerception(self.phi_dp[index].detach().cpu().double().numpy(), self.view_count)


class DepthPerceptiveNetwork(nn.Module):

    def __init__(self, view_count: int = 3):
        super().__init__()
        if view_count not in (1, 3):
            raise ConfigException(f"view_count {view_count} not in (1, 3)")
        self.view_count = view_count
        self.scale = guidance_scale(view_count)
        channels = guidance_channels(view_count)
        w2, w4, w8 = ENCODER_WIDTHS

        # Bottom-up: 128 -> 64 -> 32 -> 16
        self.enc2 = nn.Sequential(ConvBlock(view_count, w2, stride=2), ConvBlock(w2, w2))
        self.enc4 = nn.Sequential(ConvBlock(w2, w4, stride=2), ConvBlock(w4, w4))
        self.enc8 = nn.Sequential(ConvBlock(w4, w8, stride=2), ConvBlock(w8, w8))

        # Top-down: 16 -> 32 -> 64
        self.up4 = UpStage(w8, w4, w4)
        self.up2 = UpStage(w4, w2, w2)

        self.transforms = nn.ModuleList([nn.Conv2d(w, channels, 1) for w in (w8, w4, w2)])

        # Generator continues from the 1/2 level to full resolution.
        self.depth_head = nn.Sequential(
            nn.ConvTranspose2d(w2 + channels, w2, 3, stride=2, padding=1, output_padding=1, bias=False),
            nn.BatchNorm2d(w2),
            nn.ReLU(inplace=True),
            nn.Conv2d(w2, 16, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(16, 1, 3, padding=1),
            nn.Sigmoid(),
        )
        init_weights(self)

    def forward(self, x: torch.Tensor) -> DpnOutput:
        check_input(x, self.view_count)
        e2 = self.enc2(x)
        e4 = self.enc4(e2)
        d8 = self.enc8(e4)
        d4 = self.up4(d8, e4)
        d2 = self.up2(d4, e2)

        features = (d8, d4, d2)
        level_phi = tuple(resize(t(f), self.scale) for t, f in zip(self.transforms, features))
        phi = level_phi[0] + level_phi[1] + level_phi[2]
        fake_depth = self.depth_head(torch.cat([d2, resize(phi, d2.shape[-1])], dim=1))
        return DpnOutput(level_phi, fake_depth, features, self.view_count)


def dpn_forward(network: DepthPerceptiveNetwork, stack: SilhouetteStack) -> DpnOutput:
    """Single-stack forward in evaluation mode."""
    network.eval()
    param = next(network.parameters())
    with torch.no_grad():
        return network(stack_tensor([stack], network.view_count, param.device, param.dtype))


def build_dpn(config: TrainConfig) -> Optional[DepthPerceptiveNetwork]:
    """The network for a training configuration, or None when no variant term needs it."""
    return DepthPerceptiveNetwork(config.view_count) if config.uses_dpn else None


def guidance_variant(output: DpnOutput, dp_levels: DpLevels,
                     include_fake_depth: bool) -> Optional[torch.Tensor]:
    """
    Guidance tensor supervising the latent heatmaps.

    HDP sums the 1/8 and 1/4 levels, FDP all three. With include_fake_depth the fake depth map,
    resampled to S x S, is added to every channel; with no levels it is the guidance on its own.

    Returns:
        (B, J*V, S, S) tensor, or None when the variant has no guidance at all.
    """
    dp_levels = DpLevels(dp_levels)
    scale = output.level_phi[0].shape[-1]
    guidance = None
    if dp_levels is not DpLevels.NONE:
        guidance = sum(output.level_phi[i] for i in LEVELS_BY_VARIANT[dp_levels])
    if include_fake_depth:
        fake = resize(output.fake_depth, scale)
        if guidance is None:
            guidance = fake.expand(-1, output.level_phi[0].shape[1], -1, -1)
        else:
            guidance = guidance + fake
    return guidance


def fake_depth_image(output: DpnOutput, index: int = 0) -> np.ndarray:
    """(128, 128) float array of the fake depth map."""
    return output.fake_depth[index, 0].detach().cpu().numpy()
