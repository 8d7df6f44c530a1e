import json
import os
from typing import Dict, List


class ProgressTracker:
    """
    Append-only record of finished experiment variants, so an interrupted grid resumes where it
    stopped. `write_final_file` folds the records into the final results table; rows already in
    that table count as done, failed ones excepted.
    """

    def __init__(self, progress_path="progress.jsonl", final_path="results.json"):
        self.progress_path = progress_path
        self.final_path = final_path
        self.done: Dict[str, dict] = {}
        self.failed: Dict[str, str] = {}

        for row in self._final_rows():
            if row.get("status") != "failed":
                self.done[row["variant"]] = row
        if os.path.exists(self.progress_path):
            self.load_progress()

    def load_progress(self):
        """Replay all progress records to rebuild current state."""
        if not os.path.exists(self.progress_path):
            return self.done, self.failed

        with open(self.progress_path, "r", encoding="utf-8") as f:
            for line in f:
                try:
                    record = json.loads(line)
                    self._apply_record(record)
                except (ValueError, KeyError, TypeError):
                    continue  # Skip malformed lines

        return self.done, self.failed

    def _final_rows(self) -> List[dict]:
        if not os.path.exists(self.final_path):
            return []
        with open(self.final_path, "r", encoding="utf-8") as f:
            return json.load(f).get("rows", [])

    def _apply_record(self, record: dict):
        if record["type"] == "variant_done":
            self.done[record["variant"]] = record["row"]
            self.failed.pop(record["variant"], None)
        elif record["type"] == "variant_failed":
            self.failed[record["variant"]] = record["error"]

    def _write_record(self, record: dict):
        directory = os.path.dirname(self.progress_path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(self.progress_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record) + "\n")

    def add_done(self, variant: str, row: dict):
        self.done[variant] = row
        self.failed.pop(variant, None)
        self._write_record({"type": "variant_done", "variant": variant, "row": row})

    def add_failed(self, variant: str, error: str):
        self.failed[variant] = error
        self._write_record({"type": "variant_failed", "variant": variant, "error": error})

    def is_done(self, variant: str) -> bool:
        return variant in self.done

    def rows(self, order: List[str]) -> List[dict]:
        """Result rows in grid order; failed variants appear with their error."""
        rows = []
        for variant in order:
            if variant in self.done:
                rows.append(self.done[variant])
            elif variant in self.failed:
                rows.append({"variant": variant, "status": "failed", "error": self.failed[variant]})
        return rows

    def write_final_file(self, order: List[str]) -> List[dict]:
        """Merge recorded progress into the final file and drop the progress log."""
        existing = {row["variant"]: row for row in self._final_rows()}

        self.done.clear()
        self.failed.clear()
        self.load_progress()

        merged = {**existing, **{row["variant"]: row for row in self.rows(order)}}
        rows = [merged[v] for v in order if v in merged]
        with open(self.final_path, "w", encoding="utf-8") as f:
            json.dump({"rows": rows}, f, ensure_ascii=False, indent=4)

        if os.path.exists(self.progress_path):
            os.remove(self.progress_path)
        return rows

    def reset_progress(self):
        """Clear progress file and in-memory state."""
        self.done.clear()
        self.failed.clear()
        if os.path.exists(self.progress_path):
            os.remove(self.progress_path)
