"""
Residual prediction network: silhouettes in, 21 centered joint coordinates (mm) out.

Feature extractor (three convolutions and an Inception-ResNet block), two middle stages that each
emit a latent heatmap tensor and merge its re-embedding back into the features, and a prediction
block of global pooling and two fully-connected layers.
"""
from dataclasses import dataclass
from typing import List, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from Checkpoint import Checkpoint, resolve_checkpoint
from DomainTypes import (NUM_JOINTS, ConfigException, CoordinateFrame, DataException, HandPose,
                         SilhouetteStack, guidance_scale)
from LoggingSetup import get_logger
from NetworkBlocks import ConvBlock, check_input, guidance_channels, init_weights, resize, stack_tensor
from Preprocessing import DEFAULT_CUBE_MM

logger = get_logger("rpn")

FEATURE_WIDTH = 64
FEATURE_SIZE = 64
HIDDEN_WIDTH = 1024
MIDDLE_STAGES = 2


class InceptionResNetBlock(nn.Module):
    """Parallel 1x1, 3x3 and double-3x3 paths, concatenated, projected by 1x1 and added to the input."""

    def __init__(self, width: int, scale: float = 1.0):
        super().__init__()
        branch = width // 2
        self.branch0 = ConvBlock(width, branch, kernel_size=1)
        self.branch1 = nn.Sequential(ConvBlock(width, branch, kernel_size=1), ConvBlock(branch, branch))
        self.branch2 = nn.Sequential(ConvBlock(width, branch, kernel_size=1), ConvBlock(branch, branch),
                                     ConvBlock(branch, branch))
        self.project = nn.Conv2d(3 * branch, width, 1)
        self.scale = scale

    def forward(self, x):
        mixed = torch.cat([self.branch0(x), self.branch1(x), self.branch2(x)], dim=1)
        return F.relu(x + self.scale * self.project(mixed))


class MiddleStage(nn.Module):
    """
    branch0 carries the features forward; branch1 predicts the latent heatmaps H at S x S.
    The output is branch0's features plus a 1x1 re-embedding of H.
    """

    def __init__(self, width: int, channels: int, scale: int):
        super().__init__()
        stride = FEATURE_SIZE // scale
        self.branch0 = InceptionResNetBlock(width)
        self.heatmap = nn.Sequential(ConvBlock(width, width, stride=stride), nn.Conv2d(width, channels, 3, padding=1))
        self.reembed = nn.Conv2d(channels, width, 1)

    def forward(self, x):
        heatmaps = self.heatmap(x)
        features = self.branch0(x) + resize(self.reembed(heatmaps), x.shape[-1])
        return features, heatmaps


@dataclass
class RpnOutput:
    """pose: (B, 21, 3) millimeters, centered frame. heatmaps: one (B, J*V, S, S) tensor per middle stage."""
    pose: torch.Tensor
    heatmaps: List[torch.Tensor]

    def hand_pose(self, index: int = 0) -> HandPose:
        return HandPose(self.pose[index].detach().cpu().double().numpy(), CoordinateFrame.CENTERED)


class ResidualPredictionNetwork(nn.Module):

    def __init__(self, view_count: int = 3, cube_mm: float = DEFAULT_CUBE_MM):
        super().__init__()
        if view_count not in (1, 3):
            raise ConfigException(f"view_count {view_count} not in (1, 3)")
        if not cube_mm > 0:
            raise ConfigException(f"cube_mm {cube_mm} must be positive")
        self.view_count = view_count
        self.scale = guidance_scale(view_count)
        channels = guidance_channels(view_count)
        width = FEATURE_WIDTH

        self.extractor = nn.Sequential(
            ConvBlock(view_count, 32, stride=2),
            ConvBlock(32, width),
            ConvBlock(width, width),
            InceptionResNetBlock(width),
        )
        self.stages = nn.ModuleList([MiddleStage(width, channels, self.scale) for _ in range(MIDDLE_STAGES)])
        self.reduce = nn.Sequential(ConvBlock(width, 2 * width, stride=2), ConvBlock(2 * width, 4 * width, stride=2))
        self.regressor = nn.Sequential(
            nn.Linear(4 * width, HIDDEN_WIDTH),
            nn.ReLU(inplace=True),
            nn.Linear(HIDDEN_WIDTH, NUM_JOINTS * 3),
        )
        # Outputs are regressed in half-cube units.
        self.register_buffer("half_cube", torch.tensor(cube_mm / 2.0))
        init_weights(self)

    @property
    def cube_mm(self) -> float:
        return float(self.half_cube) * 2.0

    def forward(self, x: torch.Tensor) -> RpnOutput:
        check_input(x, self.view_count)
        features = self.extractor(x)
        heatmaps = []
        for stage in self.stages:
            features, h = stage(features)
            heatmaps.append(h)
        pooled = torch.flatten(F.adaptive_avg_pool2d(self.reduce(features), 1), 1)
        pose = self.regressor(pooled).view(-1, NUM_JOINTS, 3) * self.half_cube
        return RpnOutput(pose, heatmaps)


def rpn_forward(network: ResidualPredictionNetwork, stack: SilhouetteStack) -> RpnOutput:
    network.eval()
    param = next(network.parameters())
    with torch.no_grad():
        return network(stack_tensor([stack], network.view_count, param.device, param.dtype))


class PosePredictor:
    """Inference from silhouettes only. Loads the RPN weights of a checkpoint and nothing else."""

    def __init__(self, network: ResidualPredictionNetwork, device="cpu"):
        self.network = network.to(device).eval()
        self.device = device

    @property
    def view_count(self) -> int:
        return self.network.view_count

    @classmethod
    def from_checkpoint(cls, path, device="cpu") -> "PosePredictor":
        path = resolve_checkpoint(path)
        checkpoint = Checkpoint.load(path, map_location=device)
        network = ResidualPredictionNetwork(checkpoint.view_count, checkpoint.cube_mm)
        network.load_state_dict(checkpoint.rpn_state)
        logger.info(f"Loaded predictor from {path} (epoch {checkpoint.epoch}, V={checkpoint.view_count})")
        return cls(network, device)

    def infer_batch(self, stacks: Sequence[SilhouetteStack]) -> List[HandPose]:
        for stack in stacks:
            if stack.view_count < self.view_count:
                raise DataException(f"expected {self.view_count} silhouette views, got {stack.view_count}")
        with torch.no_grad():
            output = self.network(stack_tensor(stacks, self.view_count, self.device))
        return [output.hand_pose(i) for i in range(len(stacks))]

    def infer(self, stack: SilhouetteStack) -> HandPose:
        return self.infer_batch([stack])[0]


def infer(checkpoint_path, stack: SilhouetteStack, device="cpu") -> HandPose:
    return PosePredictor.from_checkpoint(checkpoint_path, device).infer(stack)
