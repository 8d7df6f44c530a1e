"""
Training objectives. All reductions are means so the weights are independent of resolution and
batch size:

    total = reg + lambda_P * p + lambda_dp * dp + lambda_W * w
"""
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence, Union

import torch
from torch import nn

from DomainTypes import CoordinateFrame, DataException, HandPose, ShapeMismatchException, TrainConfig

PoseLike = Union[torch.Tensor, HandPose, Sequence[HandPose]]


def _require_same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeMismatchException(f"{what}: shape {tuple(a.shape)} != {tuple(b.shape)}")


def loss_p(fake: torch.Tensor, real: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute depth difference over mask-valid pixels; 0 for an empty mask."""
    _require_same_shape(fake, real, "fake/real depth")
    _require_same_shape(fake, mask, "depth/mask")
    mask = mask.to(fake.dtype)
    count = mask.sum()
    if count == 0:
        return (fake * mask).sum()
    return (torch.abs(fake - real) * mask).sum() / count


def _as_tensor(pose: PoseLike) -> torch.Tensor:
    if isinstance(pose, torch.Tensor):
        return pose
    if isinstance(pose, HandPose):
        return torch.from_numpy(pose.joints)
    return torch.stack([torch.from_numpy(p.joints) for p in pose])


def _frames(pose: PoseLike):
    if isinstance(pose, HandPose):
        return {pose.frame}
    if isinstance(pose, torch.Tensor):
        return set()
    return {p.frame for p in pose}


def loss_reg(pred: PoseLike, gt: PoseLike) -> torch.Tensor:
    """Sum over joints of squared Euclidean error (mm^2), averaged over the batch."""
    frames = _frames(pred) | _frames(gt)
    if frames and frames != {CoordinateFrame.CENTERED}:
        raise DataException("pose frame mismatch", reason=f"expected centered poses, got {sorted(f.value for f in frames)}")
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    _require_same_shape(pred, gt, "predicted/ground-truth pose")
    squared = ((pred - gt) ** 2).sum(dim=(-1, -2))
    return squared.mean()


def smooth_l1(z: torch.Tensor) -> torch.Tensor:
    """z - 0.5 above 1, 0.5 z^2 otherwise; continuous with continuous slope at z = 1."""
    return torch.where(torch.abs(z) > 1, torch.abs(z) - 0.5, 0.5 * z * z)


def loss_dp(heatmaps: Sequence[torch.Tensor], guidance: torch.Tensor) -> torch.Tensor:
    """Element-wise smooth L1 between each latent heatmap tensor and the guidance, averaged."""
    if not heatmaps:
        raise ShapeMismatchException("no heatmaps to supervise")
    per_stage = []
    for h in heatmaps:
        _require_same_shape(h, guidance, "heatmap/guidance")
        per_stage.append(smooth_l1(torch.abs(h - guidance)).mean())
    return torch.stack(per_stage).mean()


def weight_regularization(modules: Iterable[Optional[nn.Module]]) -> torch.Tensor:
    """Sum of squared convolution and fully-connected weights; biases and norm parameters excluded."""
    terms = []
    for module in modules:
        if module is None:
            continue
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                terms.append((m.weight ** 2).sum())
    if not terms:
        return torch.zeros(())
    return torch.stack(terms).sum()


@dataclass
class LossInputs:
    pred_pose: PoseLike
    gt_pose: PoseLike
    heatmaps: Optional[Sequence[torch.Tensor]] = None
    guidance: Optional[torch.Tensor] = None
    fake_depth: Optional[torch.Tensor] = None
    real_depth: Optional[torch.Tensor] = None
    depth_mask: Optional[torch.Tensor] = None
    weight_sum: Optional[torch.Tensor] = None


@dataclass
class LossReport:
    """Unweighted components (None when the configuration disables them) and their weighted total."""
    total: torch.Tensor
    reg: torch.Tensor
    p: Optional[torch.Tensor] = None
    dp: Optional[torch.Tensor] = None
    w: Optional[torch.Tensor] = None
    lambda_P: float = 0.0
    lambda_dp: float = 0.0
    lambda_W: float = 0.0

    def components(self) -> Dict[str, Optional[float]]:
        return {name: None if value is None else float(value)
                for name, value in (("total", self.total), ("reg", self.reg), ("p", self.p),
                                    ("dp", self.dp), ("w", self.w))}

    def weighted(self) -> Dict[str, float]:
        def term(value, weight):
            return 0.0 if value is None else weight * float(value)
        return {"reg": float(self.reg), "p": term(self.p, self.lambda_P),
                "dp": term(self.dp, self.lambda_dp), "w": term(self.w, self.lambda_W)}


def combine(reg: torch.Tensor, p: Optional[torch.Tensor], dp: Optional[torch.Tensor],
            w: Optional[torch.Tensor], config: TrainConfig) -> LossReport:
    total = reg
    if p is not None:
        total = total + config.lambda_P * p
    if dp is not None:
        total = total + config.lambda_dp * dp
    if w is not None:
        total = total + config.lambda_W * w
    return LossReport(total, reg, p, dp, w, config.lambda_P, config.lambda_dp, config.lambda_W)


def total_loss(inputs: LossInputs, config: TrainConfig, inference: bool = False) -> LossReport:
    """
    Weighted training objective. Components behind disabled flags are absent (None) and add
    exactly nothing; with `inference` the objective is the regression term alone.
    """
    reg = loss_reg(inputs.pred_pose, inputs.gt_pose)
    if inference:
        return combine(reg, None, None, None, config)

    p = None
    if config.gt_depth_supervision:
        if inputs.fake_depth is None or inputs.real_depth is None or inputs.depth_mask is None:
            raise DataException("depth supervision enabled but depth missing")
        p = loss_p(inputs.fake_depth, inputs.real_depth, inputs.depth_mask)

    dp = None
    if config.uses_guidance:
        if inputs.heatmaps is None or inputs.guidance is None:
            raise DataException("guidance enabled but heatmaps or guidance missing")
        dp = loss_dp(inputs.heatmaps, inputs.guidance)

    return combine(reg, p, dp, inputs.weight_sum, config)
