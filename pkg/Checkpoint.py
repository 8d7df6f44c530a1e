from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import torch

from DomainTypes import DataException, TrainConfig
from LoggingSetup import get_logger

logger = get_logger("checkpoint")

LATEST_MARKER = "latest"
BEST_MARKER = "best"


@dataclass
class Checkpoint:
    """Everything needed to resume training; inference reads only `rpn_state`, `view_count` and `cube_mm`."""
    rpn_state: dict
    config: TrainConfig
    view_count: int
    cube_mm: float
    epoch: int = 0
    step: int = 0
    dpn_state: Optional[dict] = None
    optimizer_state: Optional[dict] = None
    scheduler_state: Optional[dict] = None
    history: List[dict] = field(default_factory=list)
    path: Optional[Path] = None

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "rpn": self.rpn_state,
            "dpn": self.dpn_state,
            "optimizer": self.optimizer_state,
            "scheduler": self.scheduler_state,
            "config": self.config.to_text(),
            "view_count": self.view_count,
            "cube_mm": self.cube_mm,
            "epoch": self.epoch,
            "step": self.step,
            "history": self.history,
        }, path)
        self.path = path
        return path

    @classmethod
    def load(cls, path, map_location="cpu") -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise DataException(f"missing checkpoint {path}")
        try:
            raw = torch.load(path, map_location=map_location, weights_only=True)
        except (RuntimeError, OSError, EOFError) as e:
            raise DataException(f"cannot load checkpoint {path}", reason=str(e)) from e
        config = TrainConfig().with_overrides(_parse_config_text(raw["config"]))
        return cls(raw["rpn"], config, raw["view_count"], raw["cube_mm"], raw["epoch"], raw["step"],
                   raw["dpn"], raw["optimizer"], raw["scheduler"], raw["history"], path)


def _parse_config_text(text: str) -> dict:
    values = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if sep:
            values[key] = value
    return values


def write_marker(directory, name: str, checkpoint_path: Path):
    (Path(directory) / name).write_text(Path(checkpoint_path).name + "\n", encoding="utf-8")


def resolve_checkpoint(path) -> Path:
    """
    A checkpoint file, a `latest`/`best` marker file, or a run directory (its `best` marker,
    falling back to `latest`).
    """
    path = Path(path)
    if path.is_dir():
        for marker in (BEST_MARKER, LATEST_MARKER):
            for base in (path, path / "checkpoints"):
                if (base / marker).is_file():
                    return resolve_checkpoint(base / marker)
        raise DataException(f"no checkpoint marker in {path}")
    if path.name in (BEST_MARKER, LATEST_MARKER) and path.is_file():
        return path.parent / path.read_text(encoding="utf-8").strip()
    if not path.exists():
        raise DataException(f"missing checkpoint {path}")
    return path
