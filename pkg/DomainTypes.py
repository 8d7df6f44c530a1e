"""Shared value objects for the silhouette pipeline.

All arrays are copied on construction and made read-only, so instances can be shared between
data-loading workers. Invariant violations are reported by ``violations()`` / ``validate_sample``
rather than raised, so corrupt data can be inspected before it is rejected.
"""
import dataclasses
import typing
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from dotenv import dotenv_values

NUM_JOINTS = 21
IMAGE_SIZE = 128
CENTROID_TOLERANCE_MM = 1e-6

# BigHand2.2M / HIM2017 ordering: wrist, five MCPs, then PIP/DIP/TIP per finger.
JOINT_NAMES = (
    "Wrist", "TMCP", "IMCP", "MMCP", "RMCP", "PMCP",
    "TPIP", "TDIP", "TTIP",
    "IPIP", "IDIP", "ITIP",
    "MPIP", "MDIP", "MTIP",
    "RPIP", "RDIP", "RTIP",
    "PPIP", "PDIP", "PTIP",
)
JOINT_PARENTS = (-1, 0, 0, 0, 0, 0, 1, 6, 7, 2, 9, 10, 3, 12, 13, 4, 15, 16, 5, 18, 19)
FINGER_NAMES = ("T", "I", "M", "R", "P")
FINGER_JOINTS = (
    (1, 6, 7, 8),
    (2, 9, 10, 11),
    (3, 12, 13, 14),
    (4, 15, 16, 17),
    (5, 18, 19, 20),
)
# (parent, child) pairs, one per bone, ordered by child joint.
BONES = tuple((JOINT_PARENTS[j], j) for j in range(1, NUM_JOINTS))
VIEW_NAMES = ("frontal", "side", "top")


class SilhouetteNetException(Exception):
    """
    Base exception for the pipeline.
    Carries an optional reason and the process exit code the CLI maps it to.
    """
    exit_code = 1

    def __init__(self, message: str, reason: str = None):
        self.reason = reason
        super().__init__(f"{message} (Reason: {reason})" if reason else message)


class ConfigException(SilhouetteNetException):
    exit_code = 2


class DataException(SilhouetteNetException):
    exit_code = 3


class ShapeMismatchException(DataException):
    pass


class NumericalException(SilhouetteNetException):
    exit_code = 4

    def __init__(self, message: str, checkpoint_path: str = None, reason: str = None):
        self.checkpoint_path = checkpoint_path
        super().__init__(message, reason=reason)


def _frozen_array(values, dtype=None) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


def guidance_scale(view_count: int) -> int:
    """Side length S of the depth-perception tensor: 1/4 of the input for one view, 1/2 for three."""
    return IMAGE_SIZE // 4 if view_count == 1 else IMAGE_SIZE // 2


class CoordinateFrame(str, Enum):
    CAMERA = "camera"
    CENTERED = "centered"


@dataclass(frozen=True)
class HandPose:
    joints: np.ndarray
    frame: CoordinateFrame = CoordinateFrame.CENTERED

    def __post_init__(self):
        object.__setattr__(self, "joints", _frozen_array(self.joints, np.float64))
        object.__setattr__(self, "frame", CoordinateFrame(self.frame))

    @property
    def centroid(self) -> np.ndarray:
        return self.joints.mean(axis=0)

    def centered(self) -> "HandPose":
        return HandPose(self.joints - self.centroid, CoordinateFrame.CENTERED)

    def translated(self, offset) -> "HandPose":
        return HandPose(self.joints + np.asarray(offset, dtype=np.float64), self.frame)

    def violations(self) -> List[str]:
        found = []
        if self.joints.ndim != 2 or self.joints.shape[-1] != 3:
            return [f"joints shape {self.joints.shape} != ({NUM_JOINTS}, 3)"]
        if self.joints.shape[0] != NUM_JOINTS:
            found.append(f"joint count {self.joints.shape[0]} != {NUM_JOINTS}")
        if not np.all(np.isfinite(self.joints)):
            found.append("non-finite joint coordinate")
        elif self.frame is CoordinateFrame.CENTERED and self.joints.shape[0] == NUM_JOINTS:
            offset = np.abs(self.centroid).max()
            if offset > CENTROID_TOLERANCE_MM:
                found.append(f"centered pose has centroid offset {offset:.3g} mm")
        return found


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def violations(self) -> List[str]:
        found = []
        if not (self.fx > 0 and self.fy > 0):
            found.append("focal lengths must be positive")
        if not (0 <= self.cx < self.width):
            found.append(f"cx {self.cx} outside [0, {self.width})")
        if not (0 <= self.cy < self.height):
            found.append(f"cy {self.cy} outside [0, {self.height})")
        return found

    def as_text(self) -> str:
        return f"{self.fx!r} {self.fy!r} {self.cx!r} {self.cy!r} {self.width} {self.height}"

    @classmethod
    def from_text(cls, text: str) -> "CameraIntrinsics":
        fx, fy, cx, cy, width, height = text.split()
        return cls(float(fx), float(fy), float(cx), float(cy), int(width), int(height))


@dataclass(frozen=True)
class DepthFrame:
    """Depth image in millimeters; 0 marks a missing measurement."""
    depth: np.ndarray
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        object.__setattr__(self, "depth", _frozen_array(self.depth, np.float64))

    def violations(self) -> List[str]:
        found = list(self.intrinsics.violations())
        if self.depth.shape != (self.intrinsics.height, self.intrinsics.width):
            found.append(f"depth shape {self.depth.shape} != intrinsics "
                         f"({self.intrinsics.height}, {self.intrinsics.width})")
        if not np.all(np.isfinite(self.depth)):
            found.append("non-finite depth value")
        elif np.any(self.depth < 0):
            found.append("negative depth value")
        return found


@dataclass(frozen=True)
class SilhouetteStack:
    """V binary views in fixed order (frontal, side-YZ, top-XZ), shape (V, 128, 128)."""
    views: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "views", _frozen_array(self.views))

    @property
    def view_count(self) -> int:
        return self.views.shape[0]

    @property
    def is_empty(self) -> bool:
        return not np.any(self.views)

    def select(self, view_count: int) -> "SilhouetteStack":
        """Leading views only; a three-view stack feeds single-view models with its frontal view."""
        if view_count > self.view_count:
            raise DataException(f"stack holds {self.view_count} views, {view_count} requested")
        return SilhouetteStack(self.views[:view_count])

    def violations(self) -> List[str]:
        found = []
        if self.views.ndim != 3:
            return [f"silhouette stack must be 3-dimensional, got shape {self.views.shape}"]
        if self.view_count not in (1, 3):
            found.append(f"view count {self.view_count} not in (1, 3)")
        if self.views.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE):
            found.append(f"silhouette size {self.views.shape[1:]} != ({IMAGE_SIZE}, {IMAGE_SIZE})")
        if not np.all((self.views == 0) | (self.views == 1)):
            found.append("non-binary silhouette value")
        return found


@dataclass(frozen=True)
class DepthPerception:
    """Guidance tensor, stored channel-first as (J*V, S, S)."""
    tensor: np.ndarray
    view_count: int

    def __post_init__(self):
        object.__setattr__(self, "tensor", _frozen_array(self.tensor, np.float64))

    @property
    def scale(self) -> int:
        return self.tensor.shape[-1]

    def violations(self) -> List[str]:
        found = []
        expected_channels = NUM_JOINTS * self.view_count
        if self.tensor.ndim != 3 or self.tensor.shape[0] != expected_channels:
            found.append(f"channel count of {self.tensor.shape} != {expected_channels}")
        expected_scale = guidance_scale(self.view_count)
        if self.tensor.shape[-2:] != (expected_scale, expected_scale):
            found.append(f"scale {self.tensor.shape[-2:]} != {expected_scale}")
        return found


@dataclass(frozen=True)
class Sample:
    silhouettes: SilhouetteStack
    pose: HandPose
    cube_mm: float
    depth: Optional[DepthFrame] = None
    center_mm: Optional[Tuple[float, float, float]] = None
    sample_id: str = ""


def validate_sample(s: Sample, require_depth: bool = False) -> List[str]:
    """Every invariant violation of the sample and its parts; never raises, never mutates."""
    found = list(s.silhouettes.violations()) + list(s.pose.violations())
    if s.pose.frame is not CoordinateFrame.CENTERED:
        found.append("sample pose not in centered frame")
    if not (np.isfinite(s.cube_mm) and s.cube_mm > 0):
        found.append(f"cube_mm {s.cube_mm} must be positive")
    if s.depth is not None:
        found.extend(s.depth.violations())
    elif require_depth:
        found.append("depth frame required for depth supervision")
    if s.center_mm is not None and not np.all(np.isfinite(s.center_mm)):
        found.append("non-finite crop center")
    return found


def require_valid(s: Sample, require_depth: bool = False) -> Sample:
    found = validate_sample(s, require_depth=require_depth)
    if found:
        raise DataException(f"invalid sample {s.sample_id or '<unnamed>'}", reason="; ".join(found))
    return s


class DpLevels(str, Enum):
    NONE = "none"
    HDP = "HDP"
    FDP = "FDP"


class WeightDecayMode(str, Enum):
    LR_DECAY = "lr_decay"
    L2 = "l2"


class MaxPerJointMode(str, Enum):
    JOINT_MEAN = "joint_mean"
    FRAME_MAX = "frame_max"


@dataclass(frozen=True)
class TrainConfig:
    lambda_P: float = 0.1
    lambda_dp: float = 0.1
    lambda_W: float = 0.01
    learning_rate: float = 1e-2
    lr_decay: float = 0.9
    epochs: int = 30
    batch_size: int = 32
    view_count: int = 3
    dp_levels: DpLevels = DpLevels.FDP
    include_fake_depth_in_guidance: bool = False
    gt_depth_supervision: bool = True
    seed: int = 0
    stop_gradient_on_guidance: bool = False
    weight_decay_mode: WeightDecayMode = WeightDecayMode.LR_DECAY
    max_steps: Optional[int] = None
    num_workers: int = 0
    max_per_joint_mode: MaxPerJointMode = MaxPerJointMode.JOINT_MEAN
    device: str = "cpu"
    log_every: int = 50

    def __post_init__(self):
        object.__setattr__(self, "dp_levels", DpLevels(self.dp_levels))
        object.__setattr__(self, "weight_decay_mode", WeightDecayMode(self.weight_decay_mode))
        object.__setattr__(self, "max_per_joint_mode", MaxPerJointMode(self.max_per_joint_mode))
        problems = []
        for name in ("lambda_P", "lambda_dp", "lambda_W"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be nonnegative")
        for name in ("learning_rate", "lr_decay"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be positive")
        for name in ("epochs", "batch_size", "log_every"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be a positive integer")
        if self.view_count not in (1, 3):
            problems.append(f"view_count {self.view_count} not in (1, 3)")
        if self.max_steps is not None and self.max_steps < 1:
            problems.append("max_steps must be positive when set")
        if self.num_workers < 0:
            problems.append("num_workers must be nonnegative")
        if problems:
            raise ConfigException("invalid training configuration", reason="; ".join(problems))

    @property
    def uses_guidance(self) -> bool:
        return self.dp_levels is not DpLevels.NONE or self.include_fake_depth_in_guidance

    @property
    def uses_dpn(self) -> bool:
        return self.uses_guidance or self.gt_depth_supervision

    @property
    def guidance_scale(self) -> int:
        return guidance_scale(self.view_count)

    def with_overrides(self, overrides: dict) -> "TrainConfig":
        """Copy with string-valued overrides applied; unknown keys are rejected."""
        values = dataclasses.asdict(self)
        values.update(_coerce_fields(overrides))
        return TrainConfig(**values)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Enum):
                value = value.value
            lines.append(f"{f.name}={'none' if value is None else value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls().with_overrides(load_flat_file(path))


def load_flat_file(path) -> dict:
    """Flat KEY=value file in .env syntax."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            values = dotenv_values(stream=f)
    except OSError as e:
        raise ConfigException(f"cannot read config file {path}", reason=str(e)) from e
    return {key: value for key, value in values.items() if value is not None}


def parse_overrides(pairs: Sequence[str]) -> dict:
    """`key=value` strings from the command line."""
    overrides = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigException(f"malformed override '{pair}'", reason="expected key=value")
        overrides[key.strip()] = value.strip()
    return overrides


_TRUE = {"1", "true", "yes", "y", "on"}
_FALSE = {"0", "false", "no", "n", "off"}


def _coerce_fields(raw: dict) -> dict:
    hints = typing.get_type_hints(TrainConfig)
    by_lower = {f.name.lower(): f.name for f in dataclasses.fields(TrainConfig)}
    coerced = {}
    for key, value in raw.items():
        name = by_lower.get(key.lower())
        if name is None:
            raise ConfigException(f"unknown configuration key '{key}'")
        try:
            coerced[name] = _coerce(hints[name], value)
        except (ValueError, TypeError) as e:
            raise ConfigException(f"invalid value '{value}' for '{name}'", reason=str(e)) from e
    return coerced


def _coerce(hint, value):
    if not isinstance(value, str):
        return value
    text = value.strip()
    if typing.get_origin(hint) is typing.Union:
        if text.lower() in ("", "none", "null"):
            return None
        hint = next(arg for arg in typing.get_args(hint) if arg is not type(None))
    if hint is bool:
        if text.lower() in _TRUE:
            return True
        if text.lower() in _FALSE:
            return False
        raise ValueError(f"not a boolean: {text}")
    if isinstance(hint, type) and issubclass(hint, Enum):
        for member in hint:
            if member.value.lower() == text.lower():
                return member
        raise ValueError(f"expected one of {[m.value for m in hint]}")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    return text
