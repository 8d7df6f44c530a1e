"""
Command-line entry point.

    python silhouette.py gen-data --n 2000 --out-dir data/synth
    python silhouette.py train --data-dir data/synth --config configs/fdp.env --set epochs=5
    python silhouette.py eval --checkpoint runs/train --data-dir data/synth
"""
import argparse
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
from dotenv import load_dotenv

import Plotting
from Checkpoint import Checkpoint, resolve_checkpoint
from DatasetIO import format_pose, load_split, read_image, silhouette_from_image
from DepthPerceptiveNetwork import DepthPerceptiveNetwork, dpn_forward, fake_depth_image
from DomainTypes import (FINGER_NAMES, DataException, SilhouetteNetException, SilhouetteStack, TrainConfig,
                         load_flat_file, parse_overrides)
from Evaluation import CDF_NAME, REPORT_NAME, evaluate_split, read_report, write_overlays
from him2017.Him2017Converter import convert_him2017
from LoggingSetup import get_logger, setup_logging
from ResidualPredictionNetwork import PosePredictor
from SyntheticHand import GenerationConfig, HandModelParams, make_dataset
from Trainer import EVAL_BATCH_SIZE, run_ablation_grid, run_view_comparison, train

logger = get_logger("cli")


@dataclass
class RunSpec:
    subcommand: str
    config_path: Optional[str] = None
    out_dir: Optional[Path] = None
    seed: Optional[int] = None
    overrides: List[str] = field(default_factory=list)

    def train_config(self):
        """Defaults, then the config file, then `--set` overrides and `--seed`."""
        values = load_flat_file(self.config_path) if self.config_path else {}
        values.update(parse_overrides(self.overrides))
        if self.seed is not None:
            values["seed"] = str(self.seed)
        return TrainConfig().with_overrides(values)


def default_out_dir(subcommand: str) -> Path:
    return Path(os.environ.get("SILNET_OUTPUT_ROOT", "runs")) / subcommand


def _run_spec(args) -> RunSpec:
    out_dir = Path(args.out_dir) if getattr(args, "out_dir", None) else default_out_dir(args.command)
    return RunSpec(args.command, getattr(args, "config", None), out_dir, getattr(args, "seed", None),
                   getattr(args, "set", None) or [])


def cmd_gen_data(args, spec: RunSpec):
    params = HandModelParams.from_file(args.params) if args.params else HandModelParams()
    config = GenerationConfig(view_count=args.views, cube_mm=args.cube_mm, workers=args.workers)
    make_dataset(args.n, params, config, spec.seed or 0, spec.out_dir)


def cmd_convert_him2017(args, spec: RunSpec):
    convert_him2017(args.annotations, args.images, spec.out_dir, args.limit, args.views)


def cmd_train(args, spec: RunSpec):
    config = spec.train_config()
    checkpoint = train(args.data_dir, config, spec.out_dir, resume_from=args.resume)
    logger.info(f"Training finished at epoch {checkpoint.epoch}, checkpoint {checkpoint.path}")


def cmd_ablate(args, spec: RunSpec):
    config = spec.train_config()
    grid = run_view_comparison if args.grid == "views" else run_ablation_grid
    for row in grid(args.data_dir, config, spec.out_dir):
        logger.info(f"{row['variant']}: {row.get('mean_error_mm', row.get('error'))} "
                    f"({row.get('max_per_joint_error_mm', '-')})")


def cmd_eval(args, spec: RunSpec):
    config = spec.train_config()
    predictor = PosePredictor.from_checkpoint(args.checkpoint, config.device)
    split = load_split(args.data_dir, args.split, with_depth=False, view_count=predictor.view_count)
    report, preds = evaluate_split(predictor, split, EVAL_BATCH_SIZE, config.max_per_joint_mode)
    report.write(spec.out_dir)
    if args.overlays:
        write_overlays([split[i] for i in range(min(args.overlays, len(split)))], preds, spec.out_dir / "overlays",
                       limit=args.overlays)
    logger.info(f"Mean error {report.mean_error_mm:.2f} mm, max-per-joint {report.max_per_joint_error_mm:.2f} mm "
                f"over {report.frame_count} frames")


def _pose_name(first_view: Path) -> str:
    stem = first_view.stem
    return (stem[:-len("_sil_0")] if stem.endswith("_sil_0") else stem) + "_pose.txt"


def cmd_infer(args, spec: RunSpec):
    predictor = PosePredictor.from_checkpoint(args.checkpoint)
    files = [Path(f) for f in args.silhouettes]
    view_count = predictor.view_count
    if len(files) % view_count != 0:
        raise DataException(f"expected {view_count} silhouette files per input, got {len(files)}")
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    for start in range(0, len(files), view_count):
        group = files[start:start + view_count]
        views = [silhouette_from_image(read_image(f), str(f)) for f in group]
        stack = SilhouetteStack(np.stack(views))
        problems = stack.violations()
        if problems:
            raise DataException(f"invalid silhouettes {group[0]}", reason="; ".join(problems))
        pose = predictor.infer(stack)
        path = spec.out_dir / _pose_name(group[0])
        path.write_text(format_pose(pose), encoding="utf-8")
        logger.info(f"Wrote {path}")


def cmd_plot(args, spec: RunSpec):
    wrote = []
    if args.checkpoint:
        if not args.data_dir:
            raise DataException("a depth perception grid needs --data-dir to pick a silhouette")
        wrote += _plot_phi(args, spec)
    if args.report:
        curves, fingers = {}, {}
        for item in args.report:
            label, _, directory = item.rpartition("=")
            directory = Path(directory)
            label = label or directory.name
            if not (directory / CDF_NAME).is_file():
                raise DataException(f"missing evaluation report in {directory}")
            curves[label] = Plotting.read_cdf(directory / CDF_NAME)
            report = read_report(directory / REPORT_NAME)
            fingers[label] = [report[f"finger.{name}"] for name in FINGER_NAMES]
        wrote.append(Plotting.save_figure(Plotting.plot_error_cdf(curves), spec.out_dir / "error_cdf.png"))
        wrote.append(Plotting.save_figure(Plotting.plot_finger_bars(fingers), spec.out_dir / "finger_errors.png"))
    if args.steps:
        if not Path(args.steps).is_file():
            raise DataException(f"missing training log {args.steps}")
        wrote.append(Plotting.save_figure(Plotting.plot_training_curves(args.steps),
                                          spec.out_dir / "training_curves.png"))
    if not wrote:
        raise DataException("nothing to plot", reason="pass --checkpoint, --report or --steps")


def _plot_phi(args, spec: RunSpec):
    checkpoint = Checkpoint.load(resolve_checkpoint(args.checkpoint))
    if checkpoint.dpn_state is None:
        raise DataException(f"checkpoint {checkpoint.path} has no depth perceptive network")
    network = DepthPerceptiveNetwork(checkpoint.view_count)
    network.load_state_dict(checkpoint.dpn_state)
    split = load_split(args.data_dir, args.split, with_depth=False, view_count=checkpoint.view_count)
    if len(split) == 0:
        raise DataException("empty split")
    output = dpn_forward(network, split[args.index].silhouettes)
    phi = output.perception(0)
    paths = [Plotting.save_figure(Plotting.plot_phi_grid(phi), spec.out_dir / "phi_grid.png"),
             Plotting.save_figure(Plotting.plot_fake_depth(fake_depth_image(output)), spec.out_dir / "fake_depth.png")]
    if args.rgb and checkpoint.view_count == 3:
        paths.append(Plotting.save_figure(Plotting.plot_phi_grid(phi, as_rgb=True), spec.out_dir / "phi_grid_rgb.png"))
    return paths


COMMANDS = {
    "gen-data": cmd_gen_data,
    "convert-him2017": cmd_convert_him2017,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="silhouette", description="3D hand pose from binary silhouettes.")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="flat KEY=value training configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a configuration value")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--params", help="hand model parameter file")
    p.add_argument("--views", type=int, choices=(1, 3), default=3)
    p.add_argument("--cube-mm", type=float, default=300.0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir")

    p = sub.add_parser("convert-him2017", help="convert a HIM2017 export")
    p.add_argument("--annotations", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--limit", type=int)
    p.add_argument("--views", type=int, choices=(1, 3), default=3)
    p.add_argument("--out-dir")

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--out-dir")
    with_config(p)

    p = sub.add_parser("ablate", help="train and evaluate an experiment grid")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--grid", choices=("ablation", "views"), default="ablation")
    p.add_argument("--out-dir")
    with_config(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True, help="checkpoint file, marker file or run directory")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--overlays", type=int, default=0, help="number of overlay images to write")
    p.add_argument("--out-dir")
    with_config(p)

    p = sub.add_parser("infer", help="predict poses from silhouette images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("silhouettes", nargs="+", help="V silhouette images per input, frontal view first")
    p.add_argument("--out-dir")

    p = sub.add_parser("plot", help="write figures")
    p.add_argument("--checkpoint", help="checkpoint for the depth perception grid")
    p.add_argument("--data-dir")
    p.add_argument("--split", default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--rgb", action="store_true", help="also write the colour rendering of a three-view grid")
    p.add_argument("--report", action="append", metavar="[LABEL=]DIR", help="evaluation output directory")
    p.add_argument("--steps", help="steps.csv of a training run")
    p.add_argument("--out-dir")
    return parser


def main(argv=None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    setup_logging(base_name="silhouette_net.log")

    try:
        spec = _run_spec(args)
        if spec.overrides or spec.config_path:
            spec.train_config()  # reject unknown keys before any work
        COMMANDS[args.command](args, spec)
    except SilhouetteNetException as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    except Exception:
        logger.exception(f"{args.command} failed")
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
