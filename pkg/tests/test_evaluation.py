import csv

import numpy as np
import pytest

from DomainTypes import FINGER_JOINTS, CoordinateFrame, DataException, HandPose, MaxPerJointMode, Sample
from Evaluation import (CDF_NAME, FRAME_ERRORS_NAME, GT_COLOR, PRED_COLOR, REPORT_NAME, evaluate, joint_pixels,
                        read_report, render_overlay, skeleton_mask, write_overlays)
from Preprocessing import project_views
from Trainer import evaluate_checkpoint

from conftest import random_pose, random_stack


def offset_pose(pose: HandPose, joint: int, offset) -> HandPose:
    joints = pose.joints.copy()
    joints[joint] += offset
    return HandPose(joints, CoordinateFrame.CENTERED)


def random_set(seed: int, n: int = 12):
    preds = [random_pose(seed * 1000 + i) for i in range(n)]
    gts = [random_pose(seed * 1000 + 500 + i) for i in range(n)]
    return preds, gts


def test_perfect_predictions():
    gts = [random_pose(i) for i in range(4)]
    report = evaluate(gts, gts)
    assert report.mean_error_mm == 0.0
    assert report.max_per_joint_error_mm == 0.0
    assert all(fraction == 1.0 for _, fraction in report.error_cdf)


def test_single_joint_offset():
    joints = np.zeros((21, 3))
    gt = HandPose(joints, CoordinateFrame.CENTERED)
    report = evaluate([offset_pose(gt, 0, [3.0, 4.0, 0.0])], [gt])
    assert report.mean_error_mm == pytest.approx(5.0 / 21)
    assert report.max_per_joint_error_mm == pytest.approx(5.0)
    cdf = dict(report.error_cdf)
    assert cdf[4.0] == 0.0
    assert cdf[5.0] == 1.0
    assert report.error_cdf[-1][0] == 80.0
    assert len(report.error_cdf) == 81


@pytest.mark.parametrize("seed", range(5))
def test_metrics_match_brute_force(seed):
    preds, gts = random_set(seed)
    n = len(preds)
    errors = [[float(np.sqrt(sum((p.joints[j, k] - g.joints[j, k]) ** 2 for k in range(3)))) for j in range(21)]
              for p, g in zip(preds, gts)]
    per_joint = [sum(errors[f][j] for f in range(n)) / n for j in range(21)]
    mean = sum(sum(row) for row in errors) / (21 * n)
    fingers = [sum(per_joint[j] for j in joints) / 4 for joints in FINGER_JOINTS]
    report = evaluate(preds, gts)
    assert report.mean_error_mm == pytest.approx(mean, rel=1e-9)
    assert report.max_per_joint_error_mm == pytest.approx(max(per_joint), rel=1e-9)
    assert report.per_joint_mean_mm == pytest.approx(per_joint, rel=1e-9)
    assert report.per_finger_mean_mm == pytest.approx(fingers, rel=1e-9)
    assert report.max_per_joint_error_mm >= report.mean_error_mm
    assert np.mean(report.per_joint_mean_mm) == pytest.approx(report.mean_error_mm, rel=1e-9)
    frame_max = [max(row) for row in errors]
    for threshold, fraction in report.error_cdf:
        assert fraction == pytest.approx(sum(e <= threshold for e in frame_max) / n)


def test_frame_max_mode():
    preds, gts = random_set(7)
    report = evaluate(preds, gts, MaxPerJointMode.FRAME_MAX)
    assert report.max_per_joint_error_mm == pytest.approx(report.frame_errors.max(axis=1).mean())
    assert "max_per_joint_mode=frame_max" in report.to_text()


def test_evaluation_is_permutation_equivariant():
    preds, gts = random_set(8)
    order = np.random.default_rng(0).permutation(len(preds))
    a = evaluate(preds, gts)
    b = evaluate([preds[i] for i in order], [gts[i] for i in order])
    assert b.mean_error_mm == pytest.approx(a.mean_error_mm, rel=1e-12)
    assert b.per_joint_mean_mm == pytest.approx(a.per_joint_mean_mm, rel=1e-12)
    assert b.error_cdf == a.error_cdf


def test_translation_of_both_sides_changes_nothing():
    preds, gts = random_set(9)
    t = [12.0, -7.0, 3.0]
    moved = evaluate([p.translated(t) for p in preds], [g.translated(t) for g in gts])
    assert moved.mean_error_mm == pytest.approx(evaluate(preds, gts).mean_error_mm, rel=1e-9)


def test_translating_predictions_is_bounded_by_offset():
    preds, gts = random_set(10)
    t = np.array([12.0, -7.0, 3.0])
    base = evaluate(preds, gts).mean_error_mm
    moved = evaluate([p.translated(t) for p in preds], gts).mean_error_mm
    assert moved <= base + np.linalg.norm(t) + 1e-9


def test_empty_and_mismatched_inputs():
    with pytest.raises(DataException, match="empty split"):
        evaluate([], [])
    with pytest.raises(DataException):
        evaluate([random_pose(0)], [])


def test_camera_frame_poses_are_rejected():
    pose = random_pose(0)
    with pytest.raises(DataException):
        evaluate([HandPose(pose.joints, CoordinateFrame.CAMERA)], [pose])


def test_report_round_trip(tmp_path):
    preds, gts = random_set(11)
    report = evaluate(preds, gts, sample_ids=[f"{i:06d}" for i in range(len(preds))])
    report.write(tmp_path)
    values = read_report(tmp_path / REPORT_NAME)
    assert values["mean_error_mm"] == report.mean_error_mm
    assert values["frames"] == len(preds)
    assert "finger.T" in values and "joint.Wrist" in values


def _sample(pose: HandPose) -> Sample:
    return Sample(random_stack(3, seed=0, density=0.0), pose, 300.0, sample_id="000000")


def test_joint_pixels_follow_silhouette_binning():
    pose = random_pose(12, scale=30.0)
    pixels = joint_pixels(pose, 300.0)
    for joint, (col, row) in enumerate(pixels):
        view = project_views(pose.joints[joint:joint + 1], 1, 300.0).views[0]
        assert view[row, col] == 1


def test_joint_at_cube_corner_is_drawn_at_image_corner():
    joints = random_pose(13).joints.copy()
    joints[0] = [-150.0, -150.0, 0.0]
    gt = HandPose(joints, CoordinateFrame.CENTERED)
    image = render_overlay(_sample(gt), random_pose(14))
    assert image.shape == (128, 128, 3)
    assert tuple(image[0, 0]) == GT_COLOR


@pytest.mark.parametrize("scale", [1, 4])
def test_coinciding_skeletons_share_pixels(scale):
    gt = random_pose(15)
    image = render_overlay(_sample(gt), gt, scale)
    skeleton = skeleton_mask(gt, 300.0, scale)
    pred = np.all(image == PRED_COLOR, axis=-1)
    drawn = pred | np.all(image == GT_COLOR, axis=-1)
    assert pred.any()
    assert not (pred & ~skeleton).any()
    assert np.array_equal(drawn, skeleton)


def test_prediction_is_dashed():
    gt = random_pose(15)
    image = render_overlay(_sample(gt), gt, scale=4)
    pred = np.all(image == PRED_COLOR, axis=-1)
    assert 0 < pred.sum() < skeleton_mask(gt, 300.0, 4).sum()


def test_overlays_are_written(tmp_path):
    gt = random_pose(16)
    paths = write_overlays([_sample(gt)], [gt], tmp_path, scale=2)
    assert [p.name for p in paths] == ["overlay_000000.png"]
    assert paths[0].stat().st_size > 0


def test_checkpoint_evaluation_is_reproducible(trained_run, dataset_dir, tmp_path):
    out_dir, _ = trained_run
    first, _ = evaluate_checkpoint(out_dir, dataset_dir, "test")
    second, _ = evaluate_checkpoint(out_dir, dataset_dir, "test")
    first.write(tmp_path / "a")
    second.write(tmp_path / "b")
    for name in (REPORT_NAME, CDF_NAME, FRAME_ERRORS_NAME):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_report_mean_matches_frame_errors_file(trained_run, dataset_dir, tmp_path):
    out_dir, _ = trained_run
    report, _ = evaluate_checkpoint(out_dir, dataset_dir, "test")
    report.write(tmp_path)
    with open(tmp_path / FRAME_ERRORS_NAME, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    errors = [float(row[name]) for row in rows for name in row if name not in ("frame", "sample_id")]
    assert np.mean(errors) == pytest.approx(read_report(tmp_path / REPORT_NAME)["mean_error_mm"], rel=1e-9)
