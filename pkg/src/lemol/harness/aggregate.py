"""Mean and standard deviation of per-episode metrics across runs."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..agent import read_metrics_csv


class AggregationError(ValueError):
    pass


@dataclass
class AggregateCurve:
    mean: np.ndarray
    std: np.ndarray
    n_runs: int
    column: str = "mean_reward_defender"
    window: int = 1
    sources: list[str] = field(default_factory=list)

    @property
    def episodes(self) -> np.ndarray:
        return np.arange(len(self.mean))


def sliding_mean(x: np.ndarray, window: int) -> np.ndarray:
    """Trailing mean; the first ``window - 1`` points average what is available."""
    x = np.asarray(x, dtype=np.float64)
    if window <= 1 or x.size == 0:
        return x.copy()
    c = np.concatenate([[0.0], np.cumsum(x)])
    i = np.arange(1, x.size + 1)
    lo = np.maximum(0, i - window)
    return (c[i] - c[lo]) / (i - lo)


def aggregate_arrays(runs: Sequence[np.ndarray], column: str = "value", window: int = 1,
                     sources: Sequence[str] = ()) -> AggregateCurve:
    if not runs:
        raise AggregationError("need at least one run")
    lengths = [len(r) for r in runs]
    if len(set(lengths)) != 1:
        names = list(sources) or [f"run {i}" for i in range(len(runs))]
        listing = ", ".join(f"{n} ({k} rows)" for n, k in zip(names, lengths))
        raise AggregationError(f"runs differ in length: {listing}")
    data = np.stack([sliding_mean(r, window) for r in runs])
    std = data.std(axis=0, ddof=1) if len(runs) > 1 else np.zeros(data.shape[1])
    return AggregateCurve(data.mean(axis=0), std, len(runs), column, max(1, window), list(sources))


def aggregate_runs(paths: Sequence, column: str = "mean_reward_defender", window: int = 1) -> AggregateCurve:
    runs = []
    for p in paths:
        cols = read_metrics_csv(p)
        if column not in cols:
            raise AggregationError(f"{p} has no column {column!r}")
        runs.append(cols[column])
    return aggregate_arrays(runs, column, window, [str(p) for p in paths])


def write_curve_csv(path, curve: AggregateCurve) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write(f"# column={curve.column} runs={curve.n_runs} window={curve.window}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "mean", "std", "n_runs"])
        for k, (m, s) in enumerate(zip(curve.mean, curve.std)):
            w.writerow([k, repr(float(m)), repr(float(s)), curve.n_runs])


def read_curve_csv(path) -> AggregateCurve:
    text = Path(path).read_text().splitlines()
    meta = dict(kv.split("=", 1) for kv in text[0].lstrip("# ").split()) if text[0].startswith("#") else {}
    rows = list(csv.reader([ln for ln in text if not ln.startswith("#")]))[1:]
    mean = np.array([float(r[1]) for r in rows])
    std = np.array([float(r[2]) for r in rows])
    return AggregateCurve(mean, std, int(meta.get("runs", rows[0][3] if rows else 0)),
                          meta.get("column", "value"), int(meta.get("window", 1)), [str(path)])
