"""Line-delimited JSON metrics: one record per (run, step, metric)."""
from __future__ import annotations

import json
import os
import threading
import time
from pathlib import Path
from typing import Iterable, Mapping

FIELDS = ("run_id", "step", "metric", "value", "wall_clock")

_locks: dict[str, threading.Lock] = {}
_locks_guard = threading.Lock()


class MetricsIOError(OSError):
    pass


def _lock_for(path: Path) -> threading.Lock:
    key = str(path.resolve())
    with _locks_guard:
        return _locks.setdefault(key, threading.Lock())


def export_metrics(records: Iterable[Mapping], path) -> Path:
    """Append records to ``path``; creates an empty file for an empty list."""
    path = Path(path)
    lines = []
    for r in records:
        missing = [f for f in FIELDS if f not in r]
        if missing:
            raise ValueError(f"metric record missing fields {missing}: {dict(r)}")
        lines.append(json.dumps({f: r[f] for f in FIELDS}, allow_nan=True) + "\n")
    blob = "".join(lines).encode()
    try:
        with _lock_for(path):
            fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
            try:
                # a single write per call keeps appends whole
                os.write(fd, blob)
            finally:
                os.close(fd)
    except OSError as e:
        raise MetricsIOError(f"cannot write metrics to {path}: {e}") from e
    return path


def read_metrics(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


class MetricsSink:
    """Expands dicts of scalars into records for one run and appends them."""

    def __init__(self, path, run_id: str):
        self.path = Path(path)
        self.run_id = run_id
        self.path.parent.mkdir(parents=True, exist_ok=True)
        export_metrics([], self.path)

    def log(self, step: int, values: Mapping[str, float]) -> None:
        now = time.time()
        export_metrics([{"run_id": self.run_id, "step": int(step), "metric": k, "value": float(v),
                         "wall_clock": now} for k, v in values.items()], self.path)
