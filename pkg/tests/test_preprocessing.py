import math

import numpy as np
import pytest

from DomainTypes import CameraIntrinsics, CoordinateFrame, DataException, DepthFrame, HandPose
from Preprocessing import (VIEW_AXES, backproject, bin_indices, crop_and_center, make_depth_target,
                           preprocess_frame, project_views)

from conftest import random_pose

CUBE = 300.0
RES = 128


def brute_force_bin(c: float, cube: float = CUBE, res: int = RES) -> int:
    return int(math.floor((c / cube + 0.5) * res))


def brute_force_views(cloud, view_count, cube=CUBE, res=RES):
    views = np.zeros((view_count, res, res), dtype=np.uint8)
    for point in cloud:
        bins = [brute_force_bin(c, cube, res) for c in point]
        if not all(0 <= b < res for b in bins):
            continue
        for view, (row_axis, col_axis) in enumerate(VIEW_AXES[:view_count]):
            views[view, bins[row_axis], bins[col_axis]] = 1
    return views


def brute_force_depth(cloud, cube=CUBE, res=RES):
    nearest = {}
    for x, y, z in cloud:
        bins = (brute_force_bin(x), brute_force_bin(y), brute_force_bin(z))
        if not all(0 <= b < res for b in bins):
            continue
        key = (bins[1], bins[0])
        nearest[key] = min(nearest.get(key, math.inf), z)
    target = np.zeros((res, res))
    for (row, col), z in nearest.items():
        target[row, col] = z / cube + 0.5
    return target


def random_cloud(seed: int, n: int = 1000) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-170.0, 170.0, size=(n, 3))


def test_principal_point_backprojects_onto_axis():
    k = CameraIntrinsics(500.0, 500.0, 3.0, 2.0, 8, 6)
    depth = np.zeros((6, 8))
    depth[2, 3] = 400.0
    assert np.allclose(backproject(DepthFrame(depth, k)), [[0.0, 0.0, 400.0]])


def test_pinhole_formula():
    k = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 4, 4)
    depth = np.zeros((4, 4))
    depth[1, 2] = 10.0
    assert np.allclose(backproject(DepthFrame(depth, k)), [[20.0, 10.0, 10.0]])


def test_bins_are_half_open():
    h = CUBE / 2
    assert bin_indices(np.array([-h]), CUBE)[0] == 0
    assert bin_indices(np.array([np.nextafter(h, 0)]), CUBE)[0] == RES - 1
    assert bin_indices(np.array([h]), CUBE)[0] == RES


def test_crop_translates_by_centroid():
    pose = random_pose(0).translated([10.0, -20.0, 600.0])
    pose = HandPose(pose.joints, CoordinateFrame.CAMERA)
    cloud = pose.centroid + np.array([[1.0, 2.0, 3.0]])
    shifted, centered, crop = crop_and_center(cloud, pose, CUBE)
    assert np.allclose(shifted, [[1.0, 2.0, 3.0]])
    assert np.allclose(centered.centroid, 0.0, atol=1e-6)
    assert np.allclose(crop.center_mm, pose.centroid)


def test_point_on_cube_edge_is_discarded():
    joints = np.zeros((21, 3))
    joints[:, 2] = 600.0
    pose = HandPose(joints, CoordinateFrame.CAMERA)
    c = pose.centroid
    cloud = np.array([c, c + [CUBE / 2, 0.0, 0.0], c + [CUBE, 0.0, 0.0]])
    shifted, _, _ = crop_and_center(cloud, pose, CUBE)
    assert len(shifted) == 1


def test_hand_outside_crop_volume():
    pose = HandPose(random_pose(2).joints + [0.0, 0.0, 600.0], CoordinateFrame.CAMERA)
    with pytest.raises(DataException, match="hand not in crop volume"):
        crop_and_center(pose.centroid + np.array([[1000.0, 0.0, 0.0]]), pose, CUBE)


def test_crop_rejects_centered_pose():
    with pytest.raises(DataException):
        crop_and_center(np.zeros((1, 3)), random_pose(3), CUBE)


def test_single_point_at_origin_lights_center_pixel():
    stack = project_views(np.zeros((1, 3)), 3, CUBE)
    for view in stack.views:
        assert view.sum() == 1
        assert view[64, 64] == 1


def test_mirror_symmetric_cloud_gives_mirrored_frontal_view():
    half = random_cloud(4, 200)
    # Bin centers keep the mirror exact under half-open binning.
    half = (np.floor((half / CUBE + 0.5) * RES) + 0.5) / RES * CUBE - CUBE / 2
    cloud = np.concatenate([half, half * [-1.0, 1.0, 1.0]])
    frontal = project_views(cloud, 1, CUBE).views[0]
    assert np.array_equal(frontal, frontal[:, ::-1])


@pytest.mark.parametrize("seed", range(10))
def test_projection_matches_brute_force(seed):
    cloud = random_cloud(seed)
    assert np.array_equal(project_views(cloud, 3, CUBE).views, brute_force_views(cloud, 3))


def test_projection_ignores_order_and_duplicates():
    cloud = random_cloud(11)
    shuffled = np.random.default_rng(0).permutation(np.concatenate([cloud, cloud[:100]]))
    assert np.array_equal(project_views(cloud, 3).views, project_views(shuffled, 3).views)


def test_projection_is_scale_invariant():
    cloud = random_cloud(12)
    assert np.array_equal(project_views(cloud, 3, CUBE).views, project_views(cloud * 2.0, 3, CUBE * 2.0).views)


def test_empty_cloud_gives_empty_stack():
    stack = project_views(np.zeros((0, 3)), 3)
    assert stack.is_empty


def test_depth_target_of_origin_point():
    target = make_depth_target(np.zeros((1, 3)), CUBE)
    assert target[64, 64] == 0.5
    assert target.sum() == 0.5


def test_depth_target_keeps_nearest_point():
    target = make_depth_target(np.array([[0.0, 0.0, 10.0], [0.0, 0.0, -10.0]]), CUBE)
    assert target[64, 64] == pytest.approx(-10.0 / CUBE + 0.5)


@pytest.mark.parametrize("seed", range(5))
def test_depth_target_matches_brute_force(seed):
    cloud = random_cloud(seed)
    assert np.array_equal(make_depth_target(cloud, CUBE), brute_force_depth(cloud))



def test_preprocessing_matches_brute_force_on_1000_clouds():
    rng = np.random.default_rng(2024)
    for index in range(1000):
        extent = rng.uniform(50.0, 200.0)
        cloud = rng.uniform(-extent, extent, size=(int(rng.integers(1, 300)), 3))
        expected_bins = np.array([[brute_force_bin(c) for c in point] for point in cloud])
        assert np.array_equal(bin_indices(cloud, CUBE), expected_bins), index
        assert np.array_equal(project_views(cloud, 3, CUBE).views, brute_force_views(cloud, 3)), index
        assert np.array_equal(make_depth_target(cloud, CUBE), brute_force_depth(cloud)), index

def test_frontal_silhouette_agrees_with_depth_target():
    cloud = np.concatenate([random_cloud(20), [[0.0, 0.0, -CUBE / 2]]])
    frontal = project_views(cloud, 1, CUBE).views[0]
    target = make_depth_target(cloud, CUBE)
    assert np.all(frontal[target > 0] == 1)
    zero_lit = (frontal == 1) & (target == 0)
    assert zero_lit.sum() == 1
    assert zero_lit[64, 64]


def test_preprocess_frame_builds_centered_sample():
    k = CameraIntrinsics(475.0, 475.0, 32.0, 24.0, 64, 48)
    depth = np.zeros((48, 64))
    depth[20:28, 28:36] = 600.0
    points = backproject(DepthFrame(depth, k))
    joints = points[np.linspace(0, len(points) - 1, 21).astype(int)]
    sample = preprocess_frame(DepthFrame(depth, k), HandPose(joints, CoordinateFrame.CAMERA), 3, CUBE, "x")
    assert sample.pose.frame is CoordinateFrame.CENTERED
    assert sample.silhouettes.view_count == 3
    assert not sample.silhouettes.is_empty
    assert np.allclose(sample.center_mm, joints.mean(axis=0))
