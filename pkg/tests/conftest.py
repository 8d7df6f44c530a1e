import os
import sys

import numpy as np
import pytest

from DomainTypes import IMAGE_SIZE, NUM_JOINTS, CoordinateFrame, HandPose, SilhouetteStack, TrainConfig
from SyntheticHand import GenerationConfig, HandModelParams, make_dataset
from Trainer import train

_AUDIT = {"active": False, "opened": []}


def _audit_hook(event, args):
    if _AUDIT["active"] and event == "open" and args and isinstance(args[0], (str, bytes, os.PathLike)):
        _AUDIT["opened"].append(os.fsdecode(args[0]))


sys.addaudithook(_audit_hook)


@pytest.fixture
def file_audit():
    """Paths opened while the test body runs."""
    _AUDIT["opened"] = []
    _AUDIT["active"] = True
    yield _AUDIT["opened"]
    _AUDIT["active"] = False


@pytest.fixture(autouse=True)
def _log_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("SILNET_LOG_DIR", str(tmp_path / "logs"))


def random_pose(seed: int, scale: float = 60.0) -> HandPose:
    rng = np.random.default_rng(seed)
    return HandPose(rng.normal(scale=scale, size=(NUM_JOINTS, 3)), CoordinateFrame.CAMERA).centered()


def random_stack(view_count: int, seed: int, density: float = 0.2) -> SilhouetteStack:
    rng = np.random.default_rng(seed)
    return SilhouetteStack((rng.random((view_count, IMAGE_SIZE, IMAGE_SIZE)) < density).astype(np.uint8))


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    """20 three-view synthetic samples, split 16/2/2."""
    out = tmp_path_factory.mktemp("synthetic") / "data"
    make_dataset(20, HandModelParams(), GenerationConfig(view_count=3), seed=7, out_dir=out)
    return out


@pytest.fixture(scope="session")
def small_config():
    return TrainConfig(epochs=2, batch_size=8, seed=0, log_every=1)


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory, dataset_dir, small_config):
    """A short full-model run shared by checkpoint, evaluation and CLI tests."""
    out = tmp_path_factory.mktemp("run") / "train"
    checkpoint = train(dataset_dir, small_config, out)
    return out, checkpoint
