"""
Error protocol over a prediction set: mean error, max-per-joint error, per-joint and per-finger
means and the cumulative curve of frame-wise maximum joint error.
"""
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np

from DatasetIO import batches, silhouette_to_image, write_image
from DomainTypes import (BONES, FINGER_JOINTS, FINGER_NAMES, IMAGE_SIZE, JOINT_NAMES, CoordinateFrame,
                         DataException, HandPose, MaxPerJointMode, Sample)
from LoggingSetup import get_logger
from Preprocessing import VIEW_AXES, bin_indices

logger = get_logger("evaluation")

CDF_MAX_MM = 80
CDF_STEP_MM = 1

REPORT_NAME = "report.txt"
CDF_NAME = "cdf.csv"
FRAME_ERRORS_NAME = "per_frame_errors.csv"

GT_COLOR = (0, 200, 0)
PRED_COLOR = (0, 0, 255)


@dataclass
class EvalReport:
    mean_error_mm: float
    max_per_joint_error_mm: float
    per_joint_mean_mm: np.ndarray
    per_finger_mean_mm: np.ndarray
    error_cdf: List[Tuple[float, float]]
    frame_errors: np.ndarray
    sample_ids: List[str] = field(default_factory=list)
    max_per_joint_mode: MaxPerJointMode = MaxPerJointMode.JOINT_MEAN

    @property
    def frame_count(self) -> int:
        return len(self.frame_errors)

    def summary(self) -> dict:
        return {"mean_error_mm": self.mean_error_mm, "max_per_joint_error_mm": self.max_per_joint_error_mm}

    def to_text(self) -> str:
        lines = [
            f"frames={self.frame_count}",
            f"mean_error_mm={self.mean_error_mm!r}",
            f"max_per_joint_error_mm={self.max_per_joint_error_mm!r}",
            f"max_per_joint_mode={self.max_per_joint_mode.value}",
        ]
        lines += [f"finger.{name}={value!r}" for name, value in zip(FINGER_NAMES, self.per_finger_mean_mm.tolist())]
        lines += [f"joint.{name}={value!r}" for name, value in zip(JOINT_NAMES, self.per_joint_mean_mm.tolist())]
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> Path:
        """report.txt, cdf.csv and per_frame_errors.csv in `out_dir`."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / REPORT_NAME).write_text(self.to_text(), encoding="utf-8")
        with open(out_dir / CDF_NAME, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["threshold_mm", "fraction"])
            writer.writerows((repr(t), repr(fraction)) for t, fraction in self.error_cdf)
        with open(out_dir / FRAME_ERRORS_NAME, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["frame", "sample_id", *JOINT_NAMES])
            ids = self.sample_ids or [""] * self.frame_count
            for index, (sample_id, errors) in enumerate(zip(ids, self.frame_errors.tolist())):
                writer.writerow([index, sample_id, *(repr(e) for e in errors)])
        logger.info(f"Wrote evaluation report for {self.frame_count} frames to {out_dir}")
        return out_dir / REPORT_NAME


def joint_errors(preds: Sequence[HandPose], gts: Sequence[HandPose]) -> np.ndarray:
    """(N, 21) Euclidean joint errors in millimeters."""
    if len(preds) != len(gts):
        raise DataException(f"{len(preds)} predictions for {len(gts)} ground-truth poses")
    if len(preds) == 0:
        raise DataException("empty split", reason="nothing to evaluate")
    if any(p.frame is not CoordinateFrame.CENTERED for p in list(preds) + list(gts)):
        raise DataException("evaluation expects centered poses")
    pred = np.stack([p.joints for p in preds])
    gt = np.stack([g.joints for g in gts])
    return np.linalg.norm(pred - gt, axis=-1)


def error_cdf(frame_max: np.ndarray, max_mm: int = CDF_MAX_MM, step_mm: int = CDF_STEP_MM) -> List[Tuple[float, float]]:
    """Fraction of frames whose worst joint error is within each threshold."""
    thresholds = np.arange(0, max_mm + step_mm, step_mm, dtype=np.float64)
    fractions = (frame_max[None, :] <= thresholds[:, None]).mean(axis=1)
    return list(zip(thresholds.tolist(), fractions.tolist()))


def evaluate(preds: Sequence[HandPose], gts: Sequence[HandPose],
             max_per_joint_mode: MaxPerJointMode = MaxPerJointMode.JOINT_MEAN,
             sample_ids: Optional[Sequence[str]] = None) -> EvalReport:
    errors = joint_errors(preds, gts)
    per_joint = errors.mean(axis=0)
    frame_max = errors.max(axis=1)
    if MaxPerJointMode(max_per_joint_mode) is MaxPerJointMode.FRAME_MAX:
        max_per_joint = float(frame_max.mean())
    else:
        max_per_joint = float(per_joint.max())
    per_finger = np.array([per_joint[list(joints)].mean() for joints in FINGER_JOINTS])
    return EvalReport(
        mean_error_mm=float(per_joint.mean()),
        max_per_joint_error_mm=max_per_joint,
        per_joint_mean_mm=per_joint,
        per_finger_mean_mm=per_finger,
        error_cdf=error_cdf(frame_max),
        frame_errors=errors,
        sample_ids=list(sample_ids or []),
        max_per_joint_mode=MaxPerJointMode(max_per_joint_mode),
    )


def read_report(path) -> dict:
    """Flat key/value report back into a dict; numeric values become floats."""
    values = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        key, _, value = line.partition("=")
        try:
            values[key] = float(value)
        except ValueError:
            values[key] = value
    return values


def joint_pixels(pose: HandPose, cube_mm: float, resolution: int = IMAGE_SIZE) -> np.ndarray:
    """
    (21, 2) integer (column, row) positions of the joints on the frontal view, using the same
    binning as the silhouette projection; joints outside the cube are clamped to the border.
    """
    row_axis, col_axis = VIEW_AXES[0]
    bins = bin_indices(pose.joints, cube_mm, resolution)
    pixels = np.stack([bins[:, col_axis], bins[:, row_axis]], axis=1)
    return np.clip(pixels, 0, resolution - 1)


def overlay_pixels(pose: HandPose, cube_mm: float, scale: int = 1) -> np.ndarray:
    """Joint positions on an overlay upscaled by `scale`: the centre pixel of each joint's block."""
    return joint_pixels(pose, cube_mm) * scale + (scale - 1) // 2


def bone_pixels(start, end, shape) -> np.ndarray:
    """
    (K, 2) (column, row) pixels of the one-pixel line from `start` to `end`, ordered from start to
    end. Both skeletons are rasterized through here so equal joints give equal pixels.
    """
    mask = np.zeros(shape[:2], dtype=np.uint8)
    cv2.line(mask, tuple(int(v) for v in start), tuple(int(v) for v in end), 1, 1)
    rows, cols = np.nonzero(mask)
    pixels = np.stack([cols, rows], axis=1)
    direction = np.asarray(end, dtype=np.int64) - np.asarray(start, dtype=np.int64)
    return pixels[np.argsort((pixels - np.asarray(start)) @ direction, kind="stable")]


def skeleton_mask(pose: HandPose, cube_mm: float, scale: int = 1) -> np.ndarray:
    """Boolean mask of the solid skeleton as `render_overlay` draws it."""
    size = IMAGE_SIZE * scale
    mask = np.zeros((size, size), dtype=bool)
    px = overlay_pixels(pose, cube_mm, scale)
    for parent, child in BONES:
        line = bone_pixels(px[parent], px[child], mask.shape)
        mask[line[:, 1], line[:, 0]] = True
    return mask


def render_overlay(sample: Sample, pred: HandPose, scale: int = 1, dash: int = 3) -> np.ndarray:
    """
    Frontal silhouette with the ground-truth skeleton (solid) and the prediction (dashed). Dashes
    are runs of `dash` pixels taken from the solid line between the predicted joints.

    Returns:
        np.ndarray: (128*scale, 128*scale, 3) uint8 BGR image.
    """
    background = silhouette_to_image(sample.silhouettes.views[0]) // 3
    image = cv2.cvtColor(background, cv2.COLOR_GRAY2BGR)
    if scale != 1:
        image = cv2.resize(image, None, fx=scale, fy=scale, interpolation=cv2.INTER_NEAREST)
    image[skeleton_mask(sample.pose, sample.cube_mm, scale)] = GT_COLOR
    pred_px = overlay_pixels(pred, sample.cube_mm, scale)
    for parent, child in BONES:
        line = bone_pixels(pred_px[parent], pred_px[child], image.shape)
        dashes = line[(np.arange(len(line)) // dash) % 2 == 0]
        image[dashes[:, 1], dashes[:, 0]] = PRED_COLOR
    return image


def write_overlays(samples: Sequence[Sample], preds: Sequence[HandPose], out_dir, limit: int = 16,
                   scale: int = 4) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for sample, pred in list(zip(samples, preds))[:limit]:
        path = out_dir / f"overlay_{sample.sample_id or len(paths):0>6}.png"
        write_image(path, render_overlay(sample, pred, scale))
        paths.append(path)
    return paths


def predict_split(predictor, split: Sequence[Sample], batch_size: int = 64, num_workers: int = 0):
    """Predictions, ground truth and sample ids over a split, in manifest order."""
    preds, gts, ids = [], [], []
    for batch in batches(split, batch_size, None, num_workers):
        preds.extend(predictor.infer_batch([s.silhouettes for s in batch]))
        gts.extend(s.pose for s in batch)
        ids.extend(s.sample_id for s in batch)
    return preds, gts, ids


def evaluate_split(predictor, split: Sequence[Sample], batch_size: int = 64,
                   max_per_joint_mode: MaxPerJointMode = MaxPerJointMode.JOINT_MEAN,
                   num_workers: int = 0) -> Tuple[EvalReport, List[HandPose]]:
    if len(split) == 0:
        raise DataException("empty split")
    preds, gts, ids = predict_split(predictor, split, batch_size, num_workers)
    return evaluate(preds, gts, max_per_joint_mode, ids), preds
