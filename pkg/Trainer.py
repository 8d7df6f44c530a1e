"""
Joint optimization of the depth perceptive and residual prediction networks, plus the experiment
grids built on it (depth-perception ablation and single- vs multi-view comparison).

Run directory layout:

    <out>/config.txt                 configuration snapshot
    <out>/steps.csv                  step, epoch, lr, total, reg, p, dp, w
    <out>/epochs.csv                 epoch, step, lr, train_loss, val_mean_error_mm, val_max_per_joint_error_mm
    <out>/checkpoints/epoch_XXX.pt   one per epoch, plus `latest` and `best` marker files
"""
import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from Checkpoint import BEST_MARKER, LATEST_MARKER, Checkpoint, write_marker
from DatasetIO import batches, load_split
from DepthPerceptiveNetwork import build_dpn, guidance_variant
from DomainTypes import (DataException, DpLevels, NumericalException, Sample, SilhouetteNetException,
                         TrainConfig, WeightDecayMode)
from Evaluation import evaluate_split
from LoggingSetup import get_logger, log_span
from Losses import LossInputs, total_loss, weight_regularization
from NetworkBlocks import pose_tensor, stack_tensor
from Preprocessing import depth_target_for_sample
from ProgressTracker import ProgressTracker
from ResidualPredictionNetwork import PosePredictor, ResidualPredictionNetwork

logger = get_logger("trainer")

STEP_COLUMNS = ["step", "epoch", "lr", "total", "reg", "p", "dp", "w"]
EPOCH_COLUMNS = ["epoch", "step", "lr", "train_loss", "val_mean_error_mm", "val_max_per_joint_error_mm"]
EVAL_BATCH_SIZE = 64


class DepthTargetCache:
    """Frontal depth targets recomputed once per sample from its raw depth frame."""

    def __init__(self):
        self._targets: Dict[str, np.ndarray] = {}

    def get(self, sample: Sample) -> np.ndarray:
        target = self._targets.get(sample.sample_id)
        if target is None:
            target = depth_target_for_sample(sample).astype(np.float32)
            self._targets[sample.sample_id] = target
        return target


@dataclass
class TrainingBatch:
    stacks: torch.Tensor
    poses: torch.Tensor
    depth: Optional[torch.Tensor] = None
    mask: Optional[torch.Tensor] = None


def make_batch(samples: Sequence[Sample], config: TrainConfig, depth_cache: Optional[DepthTargetCache],
               device="cpu") -> TrainingBatch:
    stacks = stack_tensor([s.silhouettes for s in samples], config.view_count, device)
    poses = pose_tensor([s.pose for s in samples], device)
    if depth_cache is None:
        return TrainingBatch(stacks, poses)
    depth = torch.from_numpy(np.stack([depth_cache.get(s) for s in samples])[:, None]).to(device)
    mask = stacks[:, :1] > 0
    return TrainingBatch(stacks, poses, depth, mask)


class Trainer:
    """One training run: builds both networks, the optimizer and the run directory writers."""

    def __init__(self, data_dir, config: TrainConfig, out_dir):
        self.data_dir = Path(data_dir)
        self.config = config
        self.out_dir = Path(out_dir)
        self.checkpoint_dir = self.out_dir / "checkpoints"
        self.device = torch.device(config.device)

        self.train_split = load_split(self.data_dir, "train", with_depth=config.gt_depth_supervision,
                                      view_count=config.view_count)
        if len(self.train_split) == 0:
            raise DataException("empty split", reason=f"no training samples in {self.data_dir}")
        self.val_split = load_split(self.data_dir, "val", with_depth=False, view_count=config.view_count)
        self.cube_mm = self.train_split.manifest.cube_mm
        self.depth_cache = DepthTargetCache() if config.gt_depth_supervision else None

        torch.manual_seed(config.seed)
        self.rpn = ResidualPredictionNetwork(config.view_count, self.cube_mm).to(self.device)
        self.dpn = build_dpn(config)
        if self.dpn is not None:
            self.dpn = self.dpn.to(self.device)

        weight_decay = config.lr_decay if config.weight_decay_mode is WeightDecayMode.L2 else 0.0
        self.optimizer = torch.optim.Adam(self.parameters(), lr=config.learning_rate, weight_decay=weight_decay)
        self.scheduler = None
        if config.weight_decay_mode is WeightDecayMode.LR_DECAY:
            self.scheduler = torch.optim.lr_scheduler.ExponentialLR(self.optimizer, gamma=config.lr_decay)

        self.epoch = 0
        self.step = 0
        self.history: List[dict] = []
        self.best_metric = math.inf
        self.last_checkpoint: Optional[Path] = None

    def parameters(self):
        params = list(self.rpn.parameters())
        if self.dpn is not None:
            params += list(self.dpn.parameters())
        return params

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def restore(self, checkpoint: Checkpoint):
        if checkpoint.view_count != self.config.view_count:
            raise DataException(f"checkpoint has V={checkpoint.view_count}, configuration has V={self.config.view_count}")
        self.rpn.load_state_dict(checkpoint.rpn_state)
        if self.dpn is not None and checkpoint.dpn_state is not None:
            self.dpn.load_state_dict(checkpoint.dpn_state)
        if checkpoint.optimizer_state is not None:
            self.optimizer.load_state_dict(checkpoint.optimizer_state)
        if self.scheduler is not None and checkpoint.scheduler_state is not None:
            self.scheduler.load_state_dict(checkpoint.scheduler_state)
        self.epoch, self.step = checkpoint.epoch, checkpoint.step
        self.history = list(checkpoint.history)
        metrics = [row["val_mean_error_mm"] for row in self.history if row.get("val_mean_error_mm") is not None]
        self.best_metric = min(metrics, default=math.inf)
        self.last_checkpoint = checkpoint.path
        logger.info(f"Resumed from {checkpoint.path} at epoch {self.epoch}, step {self.step}")

    def train_step(self, samples: Sequence[Sample]):
        config = self.config
        batch = make_batch(samples, config, self.depth_cache, self.device)
        guidance, fake_depth = None, None
        if self.dpn is not None:
            dpn_out = self.dpn(batch.stacks)
            fake_depth = dpn_out.fake_depth
            guidance = guidance_variant(dpn_out, config.dp_levels, config.include_fake_depth_in_guidance)
            if guidance is not None and config.stop_gradient_on_guidance:
                guidance = guidance.detach()
        rpn_out = self.rpn(batch.stacks)
        inputs = LossInputs(
            pred_pose=rpn_out.pose,
            gt_pose=batch.poses,
            heatmaps=rpn_out.heatmaps,
            guidance=guidance,
            fake_depth=fake_depth,
            real_depth=batch.depth,
            depth_mask=batch.mask,
            weight_sum=weight_regularization([self.rpn, self.dpn]),
        )
        report = total_loss(inputs, config)
        if not torch.isfinite(report.total):
            raise NumericalException(
                f"loss diverged at step {self.step + 1}",
                checkpoint_path=str(self.last_checkpoint) if self.last_checkpoint else None,
                reason=f"total={float(report.total)}")
        self.optimizer.zero_grad()
        report.total.backward()
        self.optimizer.step()
        self.step += 1
        return report

    def validate(self) -> Optional[dict]:
        if len(self.val_split) == 0:
            return None
        report, _ = evaluate_split(PosePredictor(self.rpn, self.device), self.val_split, EVAL_BATCH_SIZE,
                                   self.config.max_per_joint_mode, self.config.num_workers)
        self.rpn.train()
        return report.summary()

    def save(self) -> Path:
        checkpoint = Checkpoint(
            rpn_state=self.rpn.state_dict(),
            config=self.config,
            view_count=self.config.view_count,
            cube_mm=self.cube_mm,
            epoch=self.epoch,
            step=self.step,
            dpn_state=self.dpn.state_dict() if self.dpn is not None else None,
            optimizer_state=self.optimizer.state_dict(),
            scheduler_state=self.scheduler.state_dict() if self.scheduler is not None else None,
            history=self.history,
        )
        path = checkpoint.save(self.checkpoint_dir / f"epoch_{self.epoch:03d}.pt")
        write_marker(self.checkpoint_dir, LATEST_MARKER, path)
        self.last_checkpoint = path
        return path

    def run(self) -> Checkpoint:
        config = self.config
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "config.txt").write_text(config.to_text(), encoding="utf-8")
        resumed = self.step > 0
        with _CsvLog(self.out_dir / "steps.csv", STEP_COLUMNS, append=resumed) as steps_log, \
                _CsvLog(self.out_dir / "epochs.csv", EPOCH_COLUMNS, append=resumed) as epochs_log:
            self.rpn.train()
            if self.dpn is not None:
                self.dpn.train()
            while self.epoch < config.epochs and not self._step_cap_reached():
                self.epoch += 1
                lr = self.lr
                losses = []
                shuffle_seed = config.seed * 100_003 + self.epoch
                for samples in batches(self.train_split, config.batch_size, shuffle_seed, config.num_workers):
                    report = self.train_step(samples)
                    values = report.components()
                    losses.append(values["total"])
                    steps_log.write([self.step, self.epoch, lr] + [values[k] for k in STEP_COLUMNS[3:]])
                    if self.step % config.log_every == 0:
                        logger.info(f"Step {self.step} epoch {self.epoch}: loss {values['total']:.4f} "
                                    f"(reg {values['reg']:.4f})")
                    if self._step_cap_reached():
                        break
                if self.scheduler is not None:
                    self.scheduler.step()

                metrics = self.validate()
                row = {"epoch": self.epoch, "step": self.step, "lr": lr,
                       "train_loss": float(np.mean(losses)) if losses else None,
                       "val_mean_error_mm": metrics["mean_error_mm"] if metrics else None,
                       "val_max_per_joint_error_mm": metrics["max_per_joint_error_mm"] if metrics else None}
                self.history.append(row)
                epochs_log.write([row[k] for k in EPOCH_COLUMNS])
                path = self.save()
                score = row["val_mean_error_mm"] if metrics else row["train_loss"]
                if score is not None and score < self.best_metric:
                    self.best_metric = score
                    write_marker(self.checkpoint_dir, BEST_MARKER, path)
                logger.info(f"Epoch {self.epoch}/{config.epochs} done: train loss {row['train_loss']}, "
                            f"val mean error {row['val_mean_error_mm']}")
        return Checkpoint.load(self.last_checkpoint) if self.last_checkpoint else None

    def _step_cap_reached(self) -> bool:
        return self.config.max_steps is not None and self.step >= self.config.max_steps


class _CsvLog:
    def __init__(self, path: Path, columns: List[str], append: bool = False):
        self.path = path
        self.columns = columns
        self.append = append and path.exists()

    def __enter__(self):
        self._file = open(self.path, "a" if self.append else "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._file)
        if not self.append:
            self._writer.writerow(self.columns)
        return self

    def write(self, values):
        self._writer.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in values])
        self._file.flush()

    def __exit__(self, *exc):
        self._file.close()


def train(data_dir, config: TrainConfig, out_dir, resume_from=None) -> Checkpoint:
    """Train a run into `out_dir` and return its last checkpoint."""
    trainer = Trainer(data_dir, config, out_dir)
    if resume_from is not None:
        trainer.restore(Checkpoint.load(resume_from, map_location=config.device))
    with log_span(logger, "train", data_dir=str(data_dir), out_dir=str(out_dir)):
        return trainer.run()


def evaluate_checkpoint(checkpoint_path, data_dir, split: str = "test", config: TrainConfig = None):
    """Evaluation report of a checkpoint on a dataset split; depth files are never opened."""
    predictor = PosePredictor.from_checkpoint(checkpoint_path, (config or TrainConfig()).device)
    view = load_split(data_dir, split, with_depth=False, view_count=predictor.view_count)
    mode = config.max_per_joint_mode if config else TrainConfig().max_per_joint_mode
    return evaluate_split(predictor, view, EVAL_BATCH_SIZE, mode)


# Depth-perception ablation. "NoDP-GT" is the same configuration as "Baseline" and reuses its result.
ABLATION_VARIANTS = {
    "Baseline": {"dp_levels": DpLevels.NONE, "include_fake_depth_in_guidance": True, "gt_depth_supervision": True},
    "Baseline-HDP": {"dp_levels": DpLevels.HDP, "include_fake_depth_in_guidance": True, "gt_depth_supervision": True},
    "Baseline-FDP": {"dp_levels": DpLevels.FDP, "include_fake_depth_in_guidance": True, "gt_depth_supervision": True},
    "Silhouette-Net": {"dp_levels": DpLevels.FDP, "include_fake_depth_in_guidance": False, "gt_depth_supervision": True},
    "NoDP-GT": "Baseline",
    "DP-NoGT": {"dp_levels": DpLevels.FDP, "include_fake_depth_in_guidance": False, "gt_depth_supervision": False},
}

VIEW_VARIANTS = {
    "Silhouette-Net": {"view_count": 3, "dp_levels": DpLevels.FDP, "include_fake_depth_in_guidance": False,
                       "gt_depth_supervision": True},
    "2D Silhouette-Net": {"view_count": 1, "dp_levels": DpLevels.FDP, "include_fake_depth_in_guidance": False,
                          "gt_depth_supervision": True},
    "Single-view-baseline": {"view_count": 1, "dp_levels": DpLevels.NONE, "include_fake_depth_in_guidance": False,
                             "gt_depth_supervision": False},
}


def variant_config(base: TrainConfig, overrides: dict) -> TrainConfig:
    return base.with_overrides(overrides)


def _variant_dir(out_dir: Path, variant: str) -> Path:
    return out_dir / variant.replace(" ", "_")


def run_grid(data_dir, base_config: TrainConfig, out_dir, variants: Dict[str, object], name: str) -> List[dict]:
    """
    Train and test-evaluate every variant, resuming from the grid's progress log. A failing
    variant is recorded and the grid goes on.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tracker = ProgressTracker(str(out_dir / "progress.jsonl"), str(out_dir / f"{name}.json"))
    order = list(variants)
    for index, (variant, entry) in enumerate(variants.items(), start=1):
        if tracker.is_done(variant):
            logger.info(f"Skipping {variant}: already recorded")
            continue
        if isinstance(entry, str):
            if tracker.is_done(entry):
                tracker.add_done(variant, {**tracker.done[entry], "variant": variant, "same_as": entry})
            else:
                tracker.add_failed(variant, tracker.failed.get(entry, f"{entry} has no result"))
            continue
        config = variant_config(base_config, entry)
        try:
            with log_span(logger, "variant", variant=variant, index=index, total=len(variants)):
                checkpoint = train(data_dir, config, _variant_dir(out_dir, variant))
                report, _ = evaluate_checkpoint(_variant_dir(out_dir, variant), data_dir, "test", config)
        except SilhouetteNetException as e:
            logger.error(f"Variant {variant} failed: {e}")
            tracker.add_failed(variant, str(e))
            continue
        tracker.add_done(variant, {
            "variant": variant,
            "status": "ok",
            "view_count": config.view_count,
            "dp_levels": config.dp_levels.value,
            "fake_depth": config.include_fake_depth_in_guidance,
            "gt_depth": config.gt_depth_supervision,
            "epochs": checkpoint.epoch if checkpoint else 0,
            "mean_error_mm": report.mean_error_mm,
            "max_per_joint_error_mm": report.max_per_joint_error_mm,
        })
    rows = tracker.write_final_file(order)
    _write_table(out_dir / f"{name}.csv", rows)
    return rows


def _write_table(path: Path, rows: List[dict]):
    columns = ["variant", "status", "view_count", "dp_levels", "fake_depth", "gt_depth",
               "mean_error_mm", "max_per_joint_error_mm", "error"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def run_ablation_grid(data_dir, base_config: TrainConfig, out_dir) -> List[dict]:
    return run_grid(data_dir, base_config, out_dir, ABLATION_VARIANTS, "ablation")


def run_view_comparison(data_dir, base_config: TrainConfig, out_dir) -> List[dict]:
    return run_grid(data_dir, base_config, out_dir, VIEW_VARIANTS, "views")
