import json

from ProgressTracker import ProgressTracker


def make_tracker(tmp_path) -> ProgressTracker:
    return ProgressTracker(str(tmp_path / "progress.jsonl"), str(tmp_path / "results.json"))


def test_records_survive_a_restart(tmp_path):
    tracker = make_tracker(tmp_path)
    tracker.add_done("Baseline", {"variant": "Baseline", "mean_error_mm": 7.5})
    tracker.add_failed("Baseline-HDP", "loss diverged")

    reloaded = make_tracker(tmp_path)
    assert reloaded.is_done("Baseline")
    assert reloaded.failed == {"Baseline-HDP": "loss diverged"}


def test_later_success_clears_failure(tmp_path):
    tracker = make_tracker(tmp_path)
    tracker.add_failed("DP-NoGT", "boom")
    tracker.add_done("DP-NoGT", {"variant": "DP-NoGT"})
    assert make_tracker(tmp_path).failed == {}


def test_malformed_lines_are_skipped(tmp_path):
    (tmp_path / "progress.jsonl").write_text(
        "not json\n" + json.dumps({"type": "variant_done", "variant": "a", "row": {"variant": "a"}}) + "\n")
    assert make_tracker(tmp_path).done == {"a": {"variant": "a"}}


def test_rows_follow_grid_order(tmp_path):
    tracker = make_tracker(tmp_path)
    tracker.add_done("b", {"variant": "b"})
    tracker.add_failed("a", "err")
    assert tracker.rows(["a", "b", "c"]) == [{"variant": "a", "status": "failed", "error": "err"}, {"variant": "b"}]


def test_final_file_merges_earlier_results(tmp_path):
    (tmp_path / "results.json").write_text(json.dumps({"rows": [{"variant": "a", "x": 1}, {"variant": "b", "x": 1}]}))
    tracker = make_tracker(tmp_path)
    tracker.add_done("b", {"variant": "b", "x": 2})
    rows = tracker.write_final_file(["a", "b"])
    assert rows == [{"variant": "a", "x": 1}, {"variant": "b", "x": 2}]
    assert json.loads((tmp_path / "results.json").read_text())["rows"] == rows
    assert not (tmp_path / "progress.jsonl").exists()


def test_reset(tmp_path):
    tracker = make_tracker(tmp_path)
    tracker.add_done("a", {"variant": "a"})
    tracker.reset_progress()
    assert not tracker.done
    assert not (tmp_path / "progress.jsonl").exists()


def test_finished_grid_counts_as_done(tmp_path):
    tracker = make_tracker(tmp_path)
    tracker.add_done("a", {"variant": "a"})
    tracker.add_failed("b", "err")
    tracker.write_final_file(["a", "b"])

    reloaded = make_tracker(tmp_path)
    assert reloaded.is_done("a")
    assert not reloaded.is_done("b")
