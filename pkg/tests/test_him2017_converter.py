import numpy as np
import pytest

from DatasetIO import load_manifest, load_split, write_image
from DomainTypes import DataException, DepthFrame
from him2017.Him2017Converter import HIM2017_INTRINSICS, Him2017Converter, convert_him2017
from Preprocessing import backproject


def write_frame(image_dir, name: str, offset_px: int):
    depth = np.zeros((480, 640), dtype=np.uint16)
    depth[200:260, 290 + offset_px:350 + offset_px] = 550
    write_image(image_dir / name, depth)
    points = backproject(DepthFrame(depth.astype(np.float64), HIM2017_INTRINSICS))
    return points[np.linspace(0, len(points) - 1, 21).astype(int)]


def write_export(tmp_path, frames: int, bad=()):
    image_dir = tmp_path / "images"
    image_dir.mkdir()
    lines = []
    for i in range(frames):
        name = f"image_D{i:08d}.png"
        joints = write_frame(image_dir, name, i)
        if i in bad:
            joints = joints + [2000.0, 0.0, 0.0]
        lines.append(" ".join([name] + [repr(float(v)) for v in joints.ravel()]))
    annotations = tmp_path / "Training_Annotation.txt"
    annotations.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return annotations, image_dir


def test_conversion_splits_in_file_order(tmp_path):
    annotations, images = write_export(tmp_path, 10)
    out = convert_him2017(annotations, images, tmp_path / "data")
    manifest = load_manifest(out)
    assert manifest.counts() == {"train": 8, "val": 1, "test": 1}
    assert manifest.intrinsics == HIM2017_INTRINSICS
    assert [e.sample_id for e in manifest.entries_for("test")] == ["000009"]
    sample = load_split(out, "train")[0]
    assert not sample.silhouettes.is_empty
    assert np.allclose(sample.pose.centroid, 0.0, atol=1e-6)


def test_limit_and_single_view(tmp_path):
    annotations, images = write_export(tmp_path, 10)
    out = Him2017Converter(annotations, images, view_count=1).convert(tmp_path / "data", limit=4)
    manifest = load_manifest(out)
    assert len(manifest.entries) == 4
    assert manifest.view_count == 1


def test_unusable_frames_are_skipped(tmp_path):
    annotations, images = write_export(tmp_path, 10, bad={2})
    (images / "image_D00000005.png").unlink()
    manifest = load_manifest(convert_him2017(annotations, images, tmp_path / "data"))
    ids = [e.sample_id for e in manifest.entries]
    assert "000002" not in ids and "000005" not in ids
    assert len(ids) == 8


def test_malformed_annotation_line(tmp_path):
    annotations = tmp_path / "ann.txt"
    annotations.write_text("image_D00000000.png 1 2 3\n", encoding="utf-8")
    with pytest.raises(DataException, match="annotation line 1"):
        list(Him2017Converter(annotations, tmp_path).annotations())


def test_missing_annotation_file(tmp_path):
    with pytest.raises(DataException, match="missing annotation file"):
        list(Him2017Converter(tmp_path / "nope.txt", tmp_path).annotations())
