"""
On-disk dataset layout shared by synthetic data and converted HIM2017 exports.

    <root>/manifest.txt
    <root>/{train,val,test}/NNNNNN_depth.png    16-bit depth, millimeters, 0 = missing
    <root>/{train,val,test}/NNNNNN_sil_{0,1,2}.png  8-bit binary silhouettes {0, 255}
    <root>/{train,val,test}/NNNNNN_pose.txt     21 lines "x y z", millimeters, centered frame

The manifest is the only index: iteration order never depends on directory listings.
"""
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import cv2
import numpy as np
from torch.utils.data import DataLoader

from DomainTypes import (NUM_JOINTS, CameraIntrinsics, CoordinateFrame, DataException, DepthFrame,
                         HandPose, Sample, SilhouetteStack, validate_sample)
from LoggingSetup import get_logger

logger = get_logger("dataset_io")

MANIFEST_NAME = "manifest.txt"
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")
MAX_DEPTH_MM = np.iinfo(np.uint16).max


def split_sizes(n: int) -> Tuple[int, int, int]:
    """8:1:1 train/val/test."""
    val = test = n // 10
    return n - val - test, val, test


def sample_files(index: int, view_count: int) -> Dict[str, str]:
    stem = f"{index:06d}"
    files = {"depth": f"{stem}_depth.png"}
    files.update({f"sil_{view}": f"{stem}_sil_{view}.png" for view in range(view_count)})
    files["pose"] = f"{stem}_pose.txt"
    return files


def _checksum(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write_bytes(path: Path, data: bytes):
    try:
        path.write_bytes(data)
    except OSError as e:
        raise DataException(f"cannot write {path}", reason=str(e)) from e


def read_bytes(path: Path) -> bytes:
    # Plain Python open, so file access stays visible to audit hooks.
    try:
        with open(path, "rb") as f:
            return f.read()
    except FileNotFoundError as e:
        raise DataException(f"missing file {path}") from e
    except OSError as e:
        raise DataException(f"cannot read {path}", reason=str(e)) from e


def encode_png(image: np.ndarray) -> bytes:
    ok, buffer = cv2.imencode(".png", image)
    if not ok:
        raise DataException("PNG encoding failed", reason=f"dtype {image.dtype}, shape {image.shape}")
    return buffer.tobytes()


def decode_png(data: bytes, source: str = "") -> np.ndarray:
    image = cv2.imdecode(np.frombuffer(data, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise DataException(f"cannot decode image {source}")
    return image


def read_image(path) -> np.ndarray:
    return decode_png(read_bytes(Path(path)), str(path))


def write_image(path, image: np.ndarray):
    _write_bytes(Path(path), encode_png(image))


def silhouette_to_image(view: np.ndarray) -> np.ndarray:
    return (np.asarray(view) * 255).astype(np.uint8)


def silhouette_from_image(image: np.ndarray, source: str = "") -> np.ndarray:
    if image.ndim != 2:
        raise DataException(f"silhouette {source} must be single-channel, got shape {image.shape}")
    if not np.all((image == 0) | (image == 255)):
        raise DataException(f"silhouette {source} is not binary", reason="pixel values outside {0, 255}")
    return (image == 255).astype(np.uint8)


def format_pose(pose: HandPose) -> str:
    # repr round-trips float64 exactly.
    return "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pose.joints.tolist())


def parse_pose(text: str, source: str = "") -> HandPose:
    try:
        joints = np.array([[float(v) for v in line.split()] for line in text.splitlines() if line.strip()])
    except ValueError as e:
        raise DataException(f"malformed pose file {source}", reason=str(e)) from e
    if joints.ndim != 2 or joints.shape[1] != 3:
        raise DataException(f"malformed pose file {source}", reason="expected lines of 'x y z'")
    return HandPose(joints, CoordinateFrame.CENTERED)


def write_sample(directory, sample_id: int, sample: Sample) -> Dict[str, str]:
    """
    Write one sample's files into `directory`.

    Returns:
        dict: file name -> sha256 checksum of the bytes written.
    """
    directory = Path(directory)
    names = sample_files(sample_id, sample.silhouettes.view_count)
    payloads = {}
    if sample.depth is not None:
        depth = np.round(sample.depth.depth)
        if depth.max(initial=0) > MAX_DEPTH_MM:
            raise DataException(f"sample {sample_id}: depth exceeds 16-bit range",
                                reason=f"max {depth.max():.0f} mm")
        payloads[names["depth"]] = encode_png(depth.astype(np.uint16))
    for view in range(sample.silhouettes.view_count):
        payloads[names[f"sil_{view}"]] = encode_png(silhouette_to_image(sample.silhouettes.views[view]))
    payloads[names["pose"]] = format_pose(sample.pose).encode("utf-8")

    checksums = {}
    for name, data in payloads.items():
        _write_bytes(directory / name, data)
        checksums[name] = _checksum(data)
    return checksums


@dataclass(frozen=True)
class ManifestEntry:
    split: str
    sample_id: str
    center_mm: Optional[Tuple[float, float, float]]
    checksums: Dict[str, str]

    def as_line(self) -> str:
        center = "none" if self.center_mm is None else ",".join(repr(float(c)) for c in self.center_mm)
        files = " ".join(f"{name}:{digest}" for name, digest in self.checksums.items())
        return f"sample={self.split} {self.sample_id} center={center} {files}"

    @classmethod
    def from_line(cls, text: str) -> "ManifestEntry":
        split, sample_id, center, *files = text.split()
        center = center.partition("=")[2]
        center_mm = None if center == "none" else tuple(float(c) for c in center.split(","))
        checksums = dict(item.split(":", 1) for item in files)
        return cls(split, sample_id, center_mm, checksums)


@dataclass
class DatasetManifest:
    view_count: int
    cube_mm: float
    intrinsics: CameraIntrinsics
    entries: List[ManifestEntry] = field(default_factory=list)
    version: int = MANIFEST_VERSION

    def counts(self) -> Dict[str, int]:
        return {split: sum(1 for e in self.entries if e.split == split) for split in SPLITS}

    def to_text(self) -> str:
        lines = [
            f"version={self.version}",
            f"view_count={self.view_count}",
            f"cube_mm={self.cube_mm!r}",
            f"intrinsics={self.intrinsics.as_text()}",
        ]
        lines += [f"count.{split}={count}" for split, count in self.counts().items()]
        lines += [entry.as_line() for entry in self.entries]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "") -> "DatasetManifest":
        header, entries = {}, []
        try:
            for line in text.splitlines():
                if not line.strip():
                    continue
                key, _, value = line.partition("=")
                if key == "sample":
                    entries.append(ManifestEntry.from_line(value))
                else:
                    header[key] = value
            manifest = cls(int(header["view_count"]), float(header["cube_mm"]),
                           CameraIntrinsics.from_text(header["intrinsics"]), entries, int(header["version"]))
        except (KeyError, ValueError) as e:
            raise DataException(f"malformed manifest {source}", reason=str(e)) from e
        if manifest.version != MANIFEST_VERSION:
            raise DataException(f"unsupported manifest version {manifest.version}")
        for split, count in manifest.counts().items():
            recorded = int(header.get(f"count.{split}", count))
            if recorded != count:
                raise DataException(f"manifest {source} lists {count} {split} samples, header says {recorded}")
        return manifest

    def entries_for(self, split: str) -> List[ManifestEntry]:
        if split not in SPLITS:
            raise DataException(f"unknown split '{split}'", reason=f"expected one of {SPLITS}")
        return [e for e in self.entries if e.split == split]


def load_manifest(root) -> DatasetManifest:
    path = Path(root) / MANIFEST_NAME
    return DatasetManifest.from_text(read_bytes(path).decode("utf-8"), str(path))


class DatasetWriter:
    """Single writer per dataset directory; the manifest is written on close()."""

    def __init__(self, root, view_count: int, cube_mm: float, intrinsics: CameraIntrinsics):
        self.root = Path(root)
        self.manifest = DatasetManifest(view_count, float(cube_mm), intrinsics)
        for split in SPLITS:
            (self.root / split).mkdir(parents=True, exist_ok=True)

    def write(self, split: str, index: int, sample: Sample):
        if sample.silhouettes.view_count != self.manifest.view_count:
            raise DataException(f"sample {index} has {sample.silhouettes.view_count} views, "
                                f"dataset expects {self.manifest.view_count}")
        checksums = write_sample(self.root / split, index, sample)
        self.manifest.entries.append(ManifestEntry(split, f"{index:06d}", sample.center_mm, checksums))

    def close(self) -> DatasetManifest:
        _write_bytes(self.root / MANIFEST_NAME, self.manifest.to_text().encode("utf-8"))
        logger.info(f"Wrote manifest for {len(self.manifest.entries)} samples: {self.manifest.counts()}")
        return self.manifest


class SplitView(Sequence):
    """
    Lazily loaded split. Files are read and checksum-verified on access; depth files are only
    opened when `with_depth` is set. A three-view dataset can be read as single-view.
    """

    def __init__(self, root, split: str, with_depth: bool = True, view_count: int = None):
        self.root = Path(root)
        self.split = split
        self.with_depth = with_depth
        self.manifest = load_manifest(self.root)
        self.entries = self.manifest.entries_for(split)
        self.view_count = view_count or self.manifest.view_count
        if self.view_count > self.manifest.view_count:
            raise DataException(f"dataset has {self.manifest.view_count} views, {self.view_count} requested")

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> Sample:
        entry = self.entries[index]
        stem = int(entry.sample_id)
        names = sample_files(stem, self.manifest.view_count)
        views = [silhouette_from_image(decode_png(self._read(entry, names[f"sil_{v}"]), names[f"sil_{v}"]))
                 for v in range(self.view_count)]
        pose = parse_pose(self._read(entry, names["pose"]).decode("utf-8"), names["pose"])
        depth = None
        if self.with_depth and names["depth"] in entry.checksums:
            image = decode_png(self._read(entry, names["depth"]), names["depth"])
            depth = DepthFrame(image.astype(np.float64), self.manifest.intrinsics)
        sample = Sample(SilhouetteStack(np.stack(views)), pose, self.manifest.cube_mm, depth=depth,
                        center_mm=entry.center_mm, sample_id=entry.sample_id)
        problems = validate_sample(sample)
        if problems:
            raise DataException(f"sample {entry.sample_id} is invalid", reason="; ".join(problems))
        return sample

    def _read(self, entry: ManifestEntry, name: str) -> bytes:
        path = self.root / self.split / name
        if name not in entry.checksums:
            raise DataException(f"sample {entry.sample_id}: {name} not in manifest")
        if not path.exists():
            raise DataException(f"sample {entry.sample_id}: missing file {name}")
        data = read_bytes(path)
        if _checksum(data) != entry.checksums[name]:
            raise DataException(f"checksum mismatch for sample {entry.sample_id}", reason=name)
        return data


def load_split(root, split: str, with_depth: bool = True, view_count: int = None) -> SplitView:
    return SplitView(root, split, with_depth=with_depth, view_count=view_count)


def _as_list(batch):
    return list(batch)


def batch_indices(n: int, batch_size: int, shuffle_seed: Optional[int]) -> List[List[int]]:
    """Seeded permutation cut into batches; the final short batch is kept."""
    if batch_size < 1:
        raise DataException("batch_size must be at least 1")
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    return [order[start:start + batch_size].tolist() for start in range(0, n, batch_size)]


def batches(split: Sequence[Sample], batch_size: int, shuffle_seed: Optional[int],
            num_workers: int = 0) -> Iterator[List[Sample]]:
    """
    One epoch of batches. Workers load ahead but batches arrive in sampler order, so the
    sequence is identical for any worker count.
    """
    loader = DataLoader(split, batch_sampler=batch_indices(len(split), batch_size, shuffle_seed),
                        collate_fn=_as_list, num_workers=num_workers)
    return iter(loader)
