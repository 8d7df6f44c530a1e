from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

from DatasetIO import DatasetWriter, read_image, split_sizes
from DomainTypes import NUM_JOINTS, CameraIntrinsics, CoordinateFrame, DataException, DepthFrame, HandPose
from LoggingSetup import get_logger, log_span
from Preprocessing import DEFAULT_CUBE_MM, preprocess_frame

logger = get_logger("him2017")

HIM2017_INTRINSICS = CameraIntrinsics(fx=475.065948, fy=475.065857, cx=315.944855, cy=245.287079,
                                      width=640, height=480)


class Him2017Converter:
    """
    Converts a HIM2017 export (annotation file plus 16-bit depth PNGs) into the dataset layout.

    Annotation lines read `image_name x1 y1 z1 ... x21 y21 z21`, millimeters, camera frame.
    """

    def __init__(self, annotation_file, image_dir, intrinsics: CameraIntrinsics = HIM2017_INTRINSICS,
                 view_count: int = 3, cube_mm: float = DEFAULT_CUBE_MM):
        self.annotation_file = Path(annotation_file)
        self.image_dir = Path(image_dir)
        self.intrinsics = intrinsics
        self.view_count = view_count
        self.cube_mm = cube_mm

    def annotations(self, limit: Optional[int] = None) -> Iterator[Tuple[str, HandPose]]:
        if not self.annotation_file.is_file():
            raise DataException(f"missing annotation file {self.annotation_file}")
        with open(self.annotation_file, "r", encoding="utf-8") as f:
            for line_number, line in enumerate(f, start=1):
                if limit is not None and line_number > limit:
                    return
                fields = line.split()
                if not fields:
                    continue
                if len(fields) != 1 + 3 * NUM_JOINTS:
                    raise DataException(f"annotation line {line_number} has {len(fields)} fields",
                                        reason=f"expected {1 + 3 * NUM_JOINTS}")
                joints = np.array(fields[1:], dtype=np.float64).reshape(NUM_JOINTS, 3)
                yield fields[0], HandPose(joints, CoordinateFrame.CAMERA)

    def convert(self, out_dir, limit: Optional[int] = None) -> Path:
        """Write the converted dataset with an 8:1:1 split in file order."""
        entries = list(self.annotations(limit))
        n_train, n_val, _ = split_sizes(len(entries))
        writer = DatasetWriter(out_dir, self.view_count, self.cube_mm, self.intrinsics)
        skipped = 0
        with log_span(logger, "convert_him2017", frames=len(entries), out_dir=str(out_dir)):
            for index, (image_name, pose) in enumerate(entries):
                split = "train" if index < n_train else "val" if index < n_train + n_val else "test"
                try:
                    depth = read_image(self.image_dir / image_name)
                    frame = DepthFrame(depth.astype(np.float64), self.intrinsics)
                    sample = preprocess_frame(frame, pose, self.view_count, self.cube_mm, f"{index:06d}")
                except DataException as e:
                    logger.error(f"Skipping {image_name}: {e}")
                    skipped += 1
                    continue
                writer.write(split, index, sample)
                if (index + 1) % 100 == 0:
                    logger.info(f"Processed {index + 1}/{len(entries)} frames")
            writer.close()
        logger.info(f"Converted {len(entries) - skipped} frames, skipped {skipped}")
        return Path(out_dir)


def convert_him2017(annotation_file, image_dir, out_dir, limit: Optional[int] = None, view_count: int = 3) -> Path:
    return Him2017Converter(annotation_file, image_dir, view_count=view_count).convert(out_dir, limit)
