"""
Procedural hand for desk-scale experiments.

A wrist-rooted five-finger chain (four articulations per finger: MCP flexion, MCP abduction,
PIP flexion, DIP flexion) is posed by forward kinematics and rendered as capsules plus a palm
sphere into a pinhole depth frame.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from DatasetIO import DatasetWriter, split_sizes
from DomainTypes import (BONES, FINGER_JOINTS, JOINT_PARENTS, NUM_JOINTS, CameraIntrinsics,
                         ConfigException, CoordinateFrame, DataException, DepthFrame, HandPose,
                         Sample, load_flat_file, validate_sample)
from LoggingSetup import get_logger, log_span
from Preprocessing import DEFAULT_CUBE_MM, preprocess_frame

logger = get_logger("synthetic_hand")

ARTICULATIONS_PER_FINGER = 4
NUM_ARTICULATIONS = ARTICULATIONS_PER_FINGER * len(FINGER_JOINTS)
PALM_JOINTS = (0, 2, 3, 4, 5)
MAX_SKIP_FRACTION = 0.01

SYNTHETIC_INTRINSICS = CameraIntrinsics(fx=475.0, fy=475.0, cx=320.0, cy=240.0, width=640, height=480)

# Hand frame in camera coordinates for the unrotated hand: fingers point up the image (-y),
# the palm faces the camera (-z).
HAND_UP = np.array([0.0, -1.0, 0.0])
HAND_PALM = np.array([0.0, 0.0, -1.0])
HAND_LATERAL = np.cross(HAND_UP, HAND_PALM)


def _deg_ranges(*pairs) -> Tuple[Tuple[float, float], ...]:
    return tuple((float(np.radians(lo)), float(np.radians(hi))) for lo, hi in pairs)


_FINGER_RANGES = ((-10, 90), (-15, 15), (0, 100), (0, 80))
_THUMB_RANGES = ((-10, 60), (-20, 30), (0, 60), (0, 80))


@dataclass(frozen=True)
class HandModelParams:
    # One length per bone, ordered by child joint (TMCP, IMCP, ..., PTIP).
    bone_lengths: Tuple[float, ...] = (35.0, 85.0, 82.0, 78.0, 72.0,
                                       40.0, 32.0, 28.0,
                                       42.0, 25.0, 22.0,
                                       46.0, 28.0, 23.0,
                                       43.0, 27.0, 22.0,
                                       35.0, 21.0, 20.0)
    finger_radii: Tuple[float, ...] = (10.0, 9.0, 9.0, 8.5, 7.5)
    palm_radius: float = 38.0
    # Per finger (T, I, M, R, P): MCP flexion, MCP abduction, PIP flexion, DIP flexion.
    joint_angle_ranges: Tuple[Tuple[float, float], ...] = _deg_ranges(*_THUMB_RANGES, *(_FINGER_RANGES * 4))
    # Direction of each wrist->MCP bone in the palm plane, degrees from the hand's up axis.
    mcp_spread_deg: Tuple[float, ...] = (-55.0, -15.0, 0.0, 14.0, 28.0)
    thumb_tilt_deg: float = 40.0
    rotation_cone_deg: float = 40.0
    wrist_offset_mm: Tuple[float, float, float] = (0.0, 60.0, 650.0)
    distance_range_mm: Tuple[float, float] = (550.0, 750.0)

    def violations(self) -> List[str]:
        found = []
        if len(self.bone_lengths) != len(BONES):
            found.append(f"bone_lengths: expected {len(BONES)} values, got {len(self.bone_lengths)}")
        if any(not length > 0 for length in self.bone_lengths):
            found.append("bone_lengths: all lengths must be positive")
        if len(self.finger_radii) != len(FINGER_JOINTS):
            found.append(f"finger_radii: expected {len(FINGER_JOINTS)} values, got {len(self.finger_radii)}")
        if any(not radius > 0 for radius in self.finger_radii):
            found.append("finger_radii: all radii must be positive")
        if not self.palm_radius > 0:
            found.append("palm_radius: must be positive")
        if len(self.joint_angle_ranges) != NUM_ARTICULATIONS:
            found.append(f"joint_angle_ranges: expected {NUM_ARTICULATIONS} ranges, got {len(self.joint_angle_ranges)}")
        if any(lo > hi for lo, hi in self.joint_angle_ranges):
            found.append("joint_angle_ranges: min must not exceed max")
        if len(self.mcp_spread_deg) != len(FINGER_JOINTS):
            found.append(f"mcp_spread_deg: expected {len(FINGER_JOINTS)} values")
        if not 0 <= self.rotation_cone_deg <= 180:
            found.append("rotation_cone_deg: must lie in [0, 180]")
        lo, hi = self.distance_range_mm
        if not 0 < lo <= hi:
            found.append("distance_range_mm: need 0 < min <= max")
        return found

    @classmethod
    def from_file(cls, path) -> "HandModelParams":
        """
        Flat KEY=value params file. Lists are comma separated; angle ranges are given in degrees
        as `min:max` items, e.g. `joint_angle_ranges=-10:60,-20:30,...`.
        """
        raw = load_flat_file(path)
        known = {f.name for f in fields(cls)}
        values = {}
        for key, text in raw.items():
            name = key.lower()
            if name not in known:
                raise ConfigException(f"unknown hand parameter '{key}'")
            try:
                values[name] = _parse_param(name, text)
            except ValueError as e:
                raise ConfigException(f"invalid hand parameter '{name}'", reason=str(e)) from e
        params = cls(**values)
        problems = params.violations()
        if problems:
            raise ConfigException("invalid hand parameters", reason="; ".join(problems))
        return params


def _parse_param(name: str, text: str):
    items = [item.strip() for item in text.split(",") if item.strip()]
    if name == "joint_angle_ranges":
        pairs = []
        for item in items:
            lo, sep, hi = item.partition(":")
            if not sep:
                raise ValueError(f"range '{item}' is not min:max")
            pairs.append((float(lo), float(hi)))
        return _deg_ranges(*pairs)
    if name in ("palm_radius", "thumb_tilt_deg", "rotation_cone_deg"):
        return float(text)
    return tuple(float(item) for item in items)


def _finger_frames(params: HandModelParams) -> List[np.ndarray]:
    """Rest orientation of each finger: columns (lateral, along finger, palm side)."""
    frames = []
    for finger, spread in enumerate(params.mcp_spread_deg):
        a = np.radians(spread)
        along = np.cos(a) * HAND_UP + np.sin(a) * HAND_LATERAL
        if finger == 0:
            along = along + np.tan(np.radians(params.thumb_tilt_deg)) * HAND_PALM
            along = along / np.linalg.norm(along)
        palm_side = HAND_PALM - HAND_PALM.dot(along) * along
        palm_side = palm_side / np.linalg.norm(palm_side)
        frames.append(np.column_stack([np.cross(along, palm_side), along, palm_side]))
    return frames


def forward_kinematics(angles: Sequence[float], params: HandModelParams,
                       rotation: np.ndarray = None, wrist_mm: Sequence[float] = None) -> HandPose:
    """
    Camera-frame joints of the hand posed with `angles`, rotated about the wrist by `rotation`
    and translated so the wrist sits at `wrist_mm`.
    """
    angles = np.asarray(angles, dtype=np.float64)
    if angles.shape != (NUM_ARTICULATIONS,):
        raise DataException(f"expected {NUM_ARTICULATIONS} joint angles, got {angles.shape}")
    rotation = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
    wrist = np.asarray(params.wrist_offset_mm if wrist_mm is None else wrist_mm, dtype=np.float64)
    lengths = np.asarray(params.bone_lengths, dtype=np.float64)

    joints = np.zeros((NUM_JOINTS, 3))
    for finger, (frame, chain) in enumerate(zip(_finger_frames(params), FINGER_JOINTS)):
        mcp_flex, mcp_abd, pip_flex, dip_flex = angles[finger * 4:finger * 4 + 4]
        mcp = chain[0]
        joints[mcp] = lengths[mcp - 1] * frame[:, 1]
        orientation = frame @ Rotation.from_euler("ZX", [mcp_abd, mcp_flex]).as_matrix()
        for joint, bend in zip(chain[1:], (0.0, pip_flex, dip_flex)):
            orientation = orientation @ Rotation.from_euler("X", bend).as_matrix()
            joints[joint] = joints[JOINT_PARENTS[joint]] + lengths[joint - 1] * orientation[:, 1]
    return HandPose(wrist + joints @ rotation.T, CoordinateFrame.CAMERA)


def sample_pose(params: HandModelParams, rng_seed) -> Tuple[np.ndarray, HandPose]:
    """Uniform articulation angles, global rotation within the cone, wrist distance within range."""
    rng = np.random.default_rng(rng_seed)
    lo, hi = np.asarray(params.joint_angle_ranges).T
    angles = rng.uniform(lo, hi)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, np.radians(params.rotation_cone_deg))
    rotation = Rotation.from_rotvec(axis * angle).as_matrix()
    wrist = np.array([params.wrist_offset_mm[0], params.wrist_offset_mm[1],
                      rng.uniform(*params.distance_range_mm)])
    return angles, forward_kinematics(angles, params, rotation, wrist)


@dataclass(frozen=True)
class Capsule:
    start: np.ndarray
    end: np.ndarray
    radius: float


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float


def hand_geometry(pose: HandPose, params: HandModelParams) -> Tuple[List[Capsule], List[Sphere]]:
    joints = pose.joints
    capsules = []
    for finger, chain in enumerate(FINGER_JOINTS):
        for joint in chain:
            capsules.append(Capsule(joints[JOINT_PARENTS[joint]], joints[joint], params.finger_radii[finger]))
    palm = Sphere(joints[list(PALM_JOINTS)].mean(axis=0), params.palm_radius)
    return capsules, [palm]


def _ray_sphere(rays: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    a = np.einsum("ij,ij->i", rays, rays)
    b = -2.0 * rays @ center
    c = center @ center - radius ** 2
    disc = b * b - 4.0 * a * c
    t = np.full(len(rays), np.inf)
    hit = disc >= 0
    t[hit] = (-b[hit] - np.sqrt(disc[hit])) / (2.0 * a[hit])
    t[t <= 0] = np.inf
    return t


def _ray_cylinder(rays: np.ndarray, capsule: Capsule) -> np.ndarray:
    axis = capsule.end - capsule.start
    length = np.linalg.norm(axis)
    t = np.full(len(rays), np.inf)
    if length == 0:
        return t
    w = axis / length
    m = -capsule.start
    d_perp = rays - np.outer(rays @ w, w)
    m_perp = m - (m @ w) * w
    a = np.einsum("ij,ij->i", d_perp, d_perp)
    b = 2.0 * d_perp @ m_perp
    c = m_perp @ m_perp - capsule.radius ** 2
    disc = b * b - 4.0 * a * c
    hit = (disc >= 0) & (a > 1e-12)
    t[hit] = (-b[hit] - np.sqrt(disc[hit])) / (2.0 * a[hit])
    with np.errstate(invalid="ignore"):
        along = t * (rays @ w) + m @ w
    t[~((along >= 0) & (along <= length) & (t > 0))] = np.inf
    return t


def render_primitives(capsules: Sequence[Capsule], spheres: Sequence[Sphere],
                      intrinsics: CameraIntrinsics) -> DepthFrame:
    """Z-buffer of the nearest surface per pixel; 0 where no primitive is hit."""
    k = intrinsics
    depth = np.zeros((k.height, k.width))
    balls = [(s.center, s.radius) for s in spheres]
    balls += [(p, c.radius) for c in capsules for p in (c.start, c.end)]
    if not balls:
        return DepthFrame(depth, k)

    points = np.array([center for center, _ in balls])
    radii = np.array([radius for _, radius in balls])
    near = points[:, 2] - radii
    if np.any(near <= 0):
        raise DataException("hand behind camera", reason="geometry crosses the image plane")
    # Conservative pixel bounding box of all primitives.
    u = k.fx * points[:, 0] / points[:, 2] + k.cx
    v = k.fy * points[:, 1] / points[:, 2] + k.cy
    pad_u = k.fx * radii / near + 1
    pad_v = k.fy * radii / near + 1
    u0, u1 = int(max(0, np.floor((u - pad_u).min()))), int(min(k.width, np.ceil((u + pad_u).max()) + 1))
    v0, v1 = int(max(0, np.floor((v - pad_v).min()))), int(min(k.height, np.ceil((v + pad_v).max()) + 1))
    if u0 >= u1 or v0 >= v1:
        return DepthFrame(depth, k)

    vv, uu = np.mgrid[v0:v1, u0:u1]
    rays = np.stack([(uu.ravel() - k.cx) / k.fx, (vv.ravel() - k.cy) / k.fy, np.ones(uu.size)], axis=1)
    nearest = np.full(len(rays), np.inf)
    for center, radius in balls:
        nearest = np.minimum(nearest, _ray_sphere(rays, np.asarray(center, dtype=np.float64), radius))
    for capsule in capsules:
        nearest = np.minimum(nearest, _ray_cylinder(rays, capsule))
    nearest[~np.isfinite(nearest)] = 0.0
    depth[v0:v1, u0:u1] = nearest.reshape(uu.shape)
    return DepthFrame(depth, k)


def render_depth(pose: HandPose, params: HandModelParams, intrinsics: CameraIntrinsics = SYNTHETIC_INTRINSICS) -> DepthFrame:
    if pose.frame is not CoordinateFrame.CAMERA:
        raise DataException("render_depth expects a camera-frame pose")
    if np.any(pose.joints[:, 2] <= 0):
        raise DataException("hand behind camera", reason="joint with z <= 0")
    capsules, spheres = hand_geometry(pose, params)
    return render_primitives(capsules, spheres, intrinsics)


def joint_radii(params: HandModelParams) -> np.ndarray:
    radii = np.full(NUM_JOINTS, params.palm_radius)
    for finger, chain in enumerate(FINGER_JOINTS):
        radii[list(chain[1:])] = params.finger_radii[finger]
    return radii


def self_occluded_joints(pose: HandPose, frame: DepthFrame, params: HandModelParams,
                         margin_mm: float = 5.0) -> np.ndarray:
    """Joints whose pixel shows a surface nearer than the joint's own surface by more than margin_mm."""
    k = frame.intrinsics
    u = np.round(k.fx * pose.joints[:, 0] / pose.joints[:, 2] + k.cx).astype(int)
    v = np.round(k.fy * pose.joints[:, 1] / pose.joints[:, 2] + k.cy).astype(int)
    inside = (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    seen = np.zeros(NUM_JOINTS)
    seen[inside] = frame.depth[v[inside], u[inside]]
    own_surface = pose.joints[:, 2] - joint_radii(params)
    return inside & (seen > 0) & (seen < own_surface - margin_mm)


@dataclass(frozen=True)
class GenerationConfig:
    view_count: int = 3
    cube_mm: float = DEFAULT_CUBE_MM
    intrinsics: CameraIntrinsics = field(default=SYNTHETIC_INTRINSICS)
    workers: int = 1


def _quantized(frame: DepthFrame) -> DepthFrame:
    # Stored depth is whole millimeters, so samples are built from the stored values.
    return DepthFrame(np.round(frame.depth), frame.intrinsics)


def generate_sample(index: int, seed: int, params: HandModelParams, config: GenerationConfig,
                    max_attempts: int = 3) -> Tuple[Optional[Sample], int]:
    """
    Sample `index` of a dataset, derived from sub-seed (seed, index) so parallel and serial
    generation agree. A failed draw is logged and replaced by (seed, index, attempt).

    Returns:
        (sample, number of retried draws); the sample is None when every draw failed.
    """
    for attempt in range(max_attempts):
        entropy = [seed, index] if attempt == 0 else [seed, index, attempt]
        try:
            _, pose = sample_pose(params, np.random.SeedSequence(entropy))
            frame = _quantized(render_depth(pose, params, config.intrinsics))
            sample = preprocess_frame(frame, pose, config.view_count, config.cube_mm)
            problems = validate_sample(sample, require_depth=True)
            if problems:
                raise DataException("generated sample failed validation", reason="; ".join(problems))
            return sample, attempt
        except DataException as e:
            logger.warning(f"Redrawing sample {index} after draw {attempt} failed: {e}")
    logger.error(f"Skipping sample {index}: {max_attempts} draws failed")
    return None, max_attempts


def _generate_chunk(args) -> List[Tuple[Optional[Sample], int]]:
    indices, seed, params, config = args
    return [generate_sample(index, seed, params, config) for index in indices]


def skip_cap(n: int) -> int:
    """Samples a dataset of `n` may lose to failed draws; at least one."""
    return max(1, int(n * MAX_SKIP_FRACTION))


def make_dataset(n: int, params: HandModelParams, config: GenerationConfig, seed: int, out_dir) -> Path:
    """
    Generate `n` samples into `out_dir` with the 8:1:1 train/val/test split. A sample whose
    draws all fail is skipped; more than `skip_cap(n)` skipped samples abort the run.
    """
    if n <= 0:
        raise DataException("dataset size must be positive")
    problems = params.violations()
    if problems:
        raise ConfigException("invalid hand parameters", reason="; ".join(problems))

    writer = DatasetWriter(out_dir, config.view_count, config.cube_mm, config.intrinsics)
    n_train, n_val, _ = split_sizes(n)
    chunk = 16
    jobs = [(range(start, min(start + chunk, n)), seed, params, config) for start in range(0, n, chunk)]

    with log_span(logger, "make_dataset", samples=n, seed=seed):
        if config.workers > 1:
            with ProcessPoolExecutor(max_workers=config.workers) as pool:
                skipped, retried = _write_results(writer, pool.map(_generate_chunk, jobs), n_train, n_val, n)
        else:
            skipped, retried = _write_results(writer, map(_generate_chunk, jobs), n_train, n_val, n)
        writer.close()
    logger.info(f"Generated {n - skipped} samples into {out_dir} ({skipped} skipped, {retried} draws retried).")
    return Path(out_dir)


def _write_results(writer: DatasetWriter, results, n_train: int, n_val: int, n: int) -> Tuple[int, int]:
    """Writes samples in index order; a skipped index leaves a gap in the ids of its split."""
    skipped = retried = 0
    index = 0
    for chunk in results:
        for sample, retries in chunk:
            split = "train" if index < n_train else "val" if index < n_train + n_val else "test"
            if sample is None:
                skipped += 1
                if skipped > skip_cap(n):
                    raise DataException("too many skipped samples", reason=f"{skipped} skipped, cap {skip_cap(n)}")
            else:
                retried += retries
                writer.write(split, index, sample)
            index += 1
            if index % 100 == 0:
                logger.info(f"Processed {index}/{n} samples.")
    return skipped, retried
