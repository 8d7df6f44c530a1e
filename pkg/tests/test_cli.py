import shutil

import pytest

from DatasetIO import load_manifest, parse_pose
from DomainTypes import TrainConfig
from Evaluation import CDF_NAME, FRAME_ERRORS_NAME, REPORT_NAME
from silhouette import RunSpec, build_parser, default_out_dir, main


def log_text(tmp_path) -> str:
    return (tmp_path / "logs" / "silhouette_net.log").read_text(encoding="utf-8")


def silhouette_files(dataset_dir, sample_id: str, view_count: int = 3):
    return [str(dataset_dir / "test" / f"{sample_id}_sil_{v}.png") for v in range(view_count)]


def test_gen_data_split_and_rerun(tmp_path):
    assert main(["gen-data", "--n", "20", "--seed", "5", "--out-dir", str(tmp_path / "a")]) == 0
    assert main(["gen-data", "--n", "20", "--seed", "5", "--out-dir", str(tmp_path / "b")]) == 0
    assert load_manifest(tmp_path / "a").counts() == {"train": 16, "val": 2, "test": 2}
    assert (tmp_path / "a" / "manifest.txt").read_bytes() == (tmp_path / "b" / "manifest.txt").read_bytes()


@pytest.mark.slow
def test_gen_data_hundred_samples(tmp_path):
    assert main(["gen-data", "--n", "100", "--workers", "2", "--out-dir", str(tmp_path)]) == 0
    assert load_manifest(tmp_path).counts() == {"train": 80, "val": 10, "test": 10}


def test_gen_data_invalid_params(tmp_path):
    params = tmp_path / "hand.env"
    params.write_text("palm_radius=-3\n", encoding="utf-8")
    code = main(["gen-data", "--n", "10", "--params", str(params), "--out-dir", str(tmp_path / "out")])
    assert code == 2
    assert "palm_radius" in log_text(tmp_path)


def test_invalid_override_is_rejected_before_work(tmp_path):
    code = main(["train", "--data-dir", str(tmp_path / "missing"), "--set", "batch_size=0",
                 "--out-dir", str(tmp_path / "run")])
    assert code == 2
    assert not (tmp_path / "run").exists()


def test_unknown_override_key(tmp_path):
    code = main(["train", "--data-dir", str(tmp_path), "--set", "lambda_q=1", "--out-dir", str(tmp_path / "run")])
    assert code == 2


def test_train_snapshot_reflects_overrides(dataset_dir, tmp_path):
    code = main(["train", "--data-dir", str(dataset_dir), "--set", "dp_levels=HDP", "--set", "epochs=1",
                 "--set", "batch_size=8", "--out-dir", str(tmp_path / "run")])
    assert code == 0
    snapshot = (tmp_path / "run" / "config.txt").read_text(encoding="utf-8")
    assert "dp_levels=HDP\n" in snapshot
    assert "lambda_P=0.1\n" in snapshot and "lambda_dp=0.1\n" in snapshot and "lambda_W=0.01\n" in snapshot


def test_config_file_then_overrides_then_seed(tmp_path):
    config = tmp_path / "run.env"
    config.write_text("epochs=3\nbatch_size=4\n", encoding="utf-8")
    spec = RunSpec("train", str(config), tmp_path, seed=9, overrides=["batch_size=2"])
    assert spec.train_config() == TrainConfig(epochs=3, batch_size=2, seed=9)


def test_default_output_root(monkeypatch, tmp_path):
    monkeypatch.setenv("SILNET_OUTPUT_ROOT", str(tmp_path))
    assert default_out_dir("eval") == tmp_path / "eval"


def test_eval_twice_is_byte_identical(trained_run, dataset_dir, tmp_path):
    out_dir, _ = trained_run
    for name in ("a", "b"):
        assert main(["eval", "--checkpoint", str(out_dir), "--data-dir", str(dataset_dir),
                     "--out-dir", str(tmp_path / name)]) == 0
    for name in (REPORT_NAME, CDF_NAME, FRAME_ERRORS_NAME):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_eval_never_reads_depth(trained_run, dataset_dir, tmp_path, file_audit):
    out_dir, _ = trained_run
    stripped = tmp_path / "data"
    shutil.copytree(dataset_dir, stripped)
    for path in stripped.glob("*/*_depth.png"):
        path.unlink()
    file_audit.clear()
    assert main(["eval", "--checkpoint", str(out_dir), "--data-dir", str(stripped),
                 "--overlays", "2", "--out-dir", str(tmp_path / "stripped")]) == 0
    assert not any(path.endswith("_depth.png") for path in file_audit)
    assert main(["eval", "--checkpoint", str(out_dir), "--data-dir", str(dataset_dir),
                 "--out-dir", str(tmp_path / "full")]) == 0
    assert (tmp_path / "stripped" / REPORT_NAME).read_bytes() == (tmp_path / "full" / REPORT_NAME).read_bytes()
    assert len(list((tmp_path / "stripped" / "overlays").glob("*.png"))) == 2


def test_infer_writes_pose_file(trained_run, dataset_dir, tmp_path, file_audit):
    out_dir, _ = trained_run
    file_audit.clear()
    code = main(["infer", "--checkpoint", str(out_dir), *silhouette_files(dataset_dir, "000018"),
                 "--out-dir", str(tmp_path)])
    assert code == 0
    text = (tmp_path / "000018_pose.txt").read_text(encoding="utf-8")
    assert len(text.splitlines()) == 21
    assert parse_pose(text).joints.shape == (21, 3)
    assert not any(path.endswith("_depth.png") for path in file_audit)


def test_infer_handles_several_inputs(trained_run, dataset_dir, tmp_path):
    out_dir, _ = trained_run
    files = silhouette_files(dataset_dir, "000018") + silhouette_files(dataset_dir, "000019")
    assert main(["infer", "--checkpoint", str(out_dir), *files, "--out-dir", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.glob("*_pose.txt")) == ["000018_pose.txt", "000019_pose.txt"]


def test_infer_with_one_view_for_three_view_model(trained_run, dataset_dir, tmp_path):
    out_dir, _ = trained_run
    code = main(["infer", "--checkpoint", str(out_dir), silhouette_files(dataset_dir, "000018")[0],
                 "--out-dir", str(tmp_path / "out")])
    assert code == 3
    assert "expected 3 silhouette files per input, got 1" in log_text(tmp_path)


def test_missing_checkpoint(dataset_dir, tmp_path):
    code = main(["eval", "--checkpoint", str(tmp_path / "nope.pt"), "--data-dir", str(dataset_dir),
                 "--out-dir", str(tmp_path / "out")])
    assert code != 0
    assert "missing checkpoint" in log_text(tmp_path)


def test_plot_outputs(trained_run, dataset_dir, tmp_path):
    out_dir, _ = trained_run
    report_dir = tmp_path / "report"
    assert main(["eval", "--checkpoint", str(out_dir), "--data-dir", str(dataset_dir),
                 "--out-dir", str(report_dir)]) == 0
    code = main(["plot", "--checkpoint", str(out_dir), "--data-dir", str(dataset_dir), "--rgb",
                 "--report", f"FDP={report_dir}", "--steps", str(out_dir / "steps.csv"),
                 "--out-dir", str(tmp_path / "figures")])
    assert code == 0
    names = {p.name for p in (tmp_path / "figures").iterdir()}
    assert names == {"phi_grid.png", "phi_grid_rgb.png", "fake_depth.png", "error_cdf.png", "finger_errors.png",
                     "training_curves.png"}


def test_plot_without_inputs(tmp_path):
    assert main(["plot", "--out-dir", str(tmp_path)]) == 3


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
