"""Layers and tensor plumbing shared by the depth perceptive and residual prediction networks."""
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from DomainTypes import IMAGE_SIZE, NUM_JOINTS, HandPose, ShapeMismatchException, SilhouetteStack


class ConvBlock(nn.Module):
    """3x3 convolution, batch normalization, ReLU."""

    def __init__(self, num_in: int, num_out: int, stride: int = 1, kernel_size: int = 3):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(num_in, num_out, kernel_size, stride=stride, padding=kernel_size // 2, bias=False),
            nn.BatchNorm2d(num_out),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


def init_weights(module: nn.Module):
    """Fan-in variance scaling for conv and linear weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def resize(x: torch.Tensor, size: int) -> torch.Tensor:
    if x.shape[-1] == size:
        return x
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)


def stack_tensor(stacks: Sequence[SilhouetteStack], view_count: int, device="cpu",
                 dtype=torch.float32) -> torch.Tensor:
    """
    Batch silhouette stacks into a (B, V, 128, 128) tensor. Three-view stacks are reduced to
    their frontal view for single-view networks.
    """
    views = []
    for stack in stacks:
        if stack.view_count < view_count:
            raise ShapeMismatchException(f"stack has {stack.view_count} views, network expects {view_count}")
        views.append(stack.select(view_count).views)
    batch = np.stack(views).astype(np.float32)
    if batch.shape[-2:] != (IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeMismatchException(f"silhouette size {batch.shape[-2:]} != ({IMAGE_SIZE}, {IMAGE_SIZE})")
    return torch.from_numpy(batch).to(device=device, dtype=dtype)


def pose_tensor(poses: Sequence[HandPose], device="cpu", dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack([p.joints for p in poses])).to(device=device, dtype=dtype)


def check_input(x: torch.Tensor, view_count: int):
    if x.ndim != 4 or x.shape[1:] != (view_count, IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeMismatchException(
            f"input shape {tuple(x.shape)} != (B, {view_count}, {IMAGE_SIZE}, {IMAGE_SIZE})")


def guidance_channels(view_count: int) -> int:
    return NUM_JOINTS * view_count
