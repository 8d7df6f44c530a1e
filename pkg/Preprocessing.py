from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from DomainTypes import (IMAGE_SIZE, CoordinateFrame, DataException, DepthFrame, HandPose, Sample,
                         SilhouetteStack)
from LoggingSetup import get_logger

logger = get_logger("preprocessing")

DEFAULT_CUBE_MM = 300.0

# (row axis, column axis) per view: frontal XY, side YZ, top XZ.
VIEW_AXES = ((1, 0), (1, 2), (2, 0))


@dataclass(frozen=True)
class CropSpec:
    center_mm: Tuple[float, float, float]
    cube_mm: float

    def violations(self) -> List[str]:
        found = []
        if not self.cube_mm > 0:
            found.append(f"cube_mm {self.cube_mm} must be positive")
        if not np.all(np.isfinite(self.center_mm)):
            found.append("non-finite crop center")
        return found


def backproject(frame: DepthFrame) -> np.ndarray:
    """
    Pinhole backprojection of every nonzero depth pixel.

    Returns:
        np.ndarray: (N, 3) points in millimeters, camera frame, row-major pixel order.
    """
    k = frame.intrinsics
    v, u = np.nonzero(frame.depth > 0)
    z = frame.depth[v, u]
    x = (u - k.cx) * z / k.fx
    y = (v - k.cy) * z / k.fy
    return np.stack([x, y, z], axis=1)


def crop_and_center(cloud: np.ndarray, pose: HandPose, cube_mm: float = DEFAULT_CUBE_MM):
    """
    Translate cloud and pose so the joint centroid is the origin and keep the points of the
    half-open crop cube [-cube/2, +cube/2)^3.

    Returns:
        (centered cloud, centered HandPose, CropSpec)
    """
    if pose.frame is not CoordinateFrame.CAMERA:
        raise DataException("crop_and_center expects a camera-frame pose")
    center = pose.centroid
    crop = CropSpec(tuple(float(c) for c in center), float(cube_mm))
    if crop.violations():
        raise DataException("invalid crop", reason="; ".join(crop.violations()))

    shifted = np.asarray(cloud, dtype=np.float64).reshape(-1, 3) - center
    half = cube_mm / 2.0
    keep = np.all((shifted >= -half) & (shifted < half), axis=1)
    if not np.any(keep):
        raise DataException("hand not in crop volume", reason=f"{len(shifted)} points, cube {cube_mm} mm")
    return shifted[keep], HandPose(pose.joints - center, CoordinateFrame.CENTERED), crop


def bin_indices(coords: np.ndarray, cube_mm: float, resolution: int = IMAGE_SIZE) -> np.ndarray:
    """Half-open bins mapping [-cube/2, +cube/2) onto [0, resolution)."""
    return np.floor((np.asarray(coords, dtype=np.float64) / cube_mm + 0.5) * resolution).astype(np.int64)


def _binned(cloud: np.ndarray, cube_mm: float, resolution: int):
    """Bin indices of the points inside the volume, and those points."""
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    bins = bin_indices(cloud, cube_mm, resolution)
    inside = np.all((bins >= 0) & (bins < resolution), axis=1)
    return bins[inside], cloud[inside]


def project_views(cloud: np.ndarray, view_count: int, cube_mm: float = DEFAULT_CUBE_MM,
                  resolution: int = IMAGE_SIZE) -> SilhouetteStack:
    """
    Orthographic occupancy projection of a centered cloud onto the frontal (XY), side (YZ)
    and top (XZ) planes. A pixel is 1 when at least one point falls in its bin.
    """
    if view_count not in (1, 3):
        raise DataException(f"view count {view_count} not in (1, 3)")
    bins, _ = _binned(cloud, cube_mm, resolution)
    views = np.zeros((view_count, resolution, resolution), dtype=np.uint8)
    for view, (row_axis, col_axis) in enumerate(VIEW_AXES[:view_count]):
        views[view, bins[:, row_axis], bins[:, col_axis]] = 1
    if len(bins) == 0:
        logger.warning("Empty point cloud projected; silhouette stack is all zeros.")
    return SilhouetteStack(views)


def make_depth_target(cloud: np.ndarray, cube_mm: float = DEFAULT_CUBE_MM,
                      resolution: int = IMAGE_SIZE) -> np.ndarray:
    """
    Frontal depth target: nearest z per XY bin, normalized from [-cube/2, +cube/2] to [0, 1].
    Bins without points are 0.
    """
    bins, points = _binned(cloud, cube_mm, resolution)
    target = np.zeros((resolution, resolution), dtype=np.float64)
    if len(bins) == 0:
        logger.warning("Empty point cloud; depth target is all zeros.")
        return target
    nearest = np.full((resolution, resolution), np.inf)
    np.minimum.at(nearest, (bins[:, 1], bins[:, 0]), points[:, 2])
    hit = np.isfinite(nearest)
    target[hit] = nearest[hit] / cube_mm + 0.5
    return target


def preprocess_frame(frame: DepthFrame, pose: HandPose, view_count: int,
                     cube_mm: float = DEFAULT_CUBE_MM, sample_id: str = "") -> Sample:
    """Raw depth frame plus camera-frame annotation -> centered training sample."""
    cloud, centered_pose, crop = crop_and_center(backproject(frame), pose, cube_mm)
    stack = project_views(cloud, view_count, cube_mm)
    return Sample(stack, centered_pose, cube_mm, depth=frame, center_mm=crop.center_mm, sample_id=sample_id)


def depth_target_for_sample(sample: Sample, resolution: int = IMAGE_SIZE) -> np.ndarray:
    """Recompute the frontal depth target of a stored sample from its raw depth frame."""
    if sample.depth is None or sample.center_mm is None:
        raise DataException(f"sample {sample.sample_id} has no depth frame for depth supervision")
    cloud = backproject(sample.depth) - np.asarray(sample.center_mm)
    return make_depth_target(cloud, sample.cube_mm, resolution)
