"""Top-k accuracy, bootstrap statistics, k-shot aggregation, and report
rendering.

Bootstrap resamples draw their indices from per-resample substreams
derived from (seed, resample index), so serial and parallel execution
produce identical statistics.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EvalError


@dataclass(frozen=True)
class BootstrapConfig:
    resamples: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.resamples < 1:
            raise EvalError(f"resamples must be >= 1, got {self.resamples}")


@dataclass
class MetricRow:
    setting: str  # "full", "5-shot", "3-shot", "1-shot", ...
    top1_mean: float  # percentages in [0, 100]
    top1_std: float
    top3_mean: float
    top3_std: float

    def __post_init__(self):
        for name in ("top1_mean", "top3_mean"):
            value = getattr(self, name)
            if not 0.0 <= value <= 100.0:
                raise EvalError(f"{name} must be a percentage in [0, 100], got {value}")
        for name in ("top1_std", "top3_std"):
            if getattr(self, name) < 0:
                raise EvalError(f"{name} must be non-negative")


@dataclass
class EvalReport:
    experiment_id: str
    rows: list[MetricRow] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "rows": [row.__dict__.copy() for row in self.rows],
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalReport":
        return cls(
            experiment_id=obj["experiment_id"],
            rows=[MetricRow(**row) for row in obj["rows"]],
            provenance=obj.get("provenance", {}),
        )


def topk_accuracy(scores: np.ndarray, labels: Sequence[int], k: int) -> float:
    """Fraction of rows whose true label is among the k best scores.
    Score ties break by ascending class index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise EvalError("scores must be a non-empty N x |Y| matrix")
    n, n_classes = scores.shape
    if not 1 <= k <= n_classes:
        raise EvalError(f"k must be in [1, {n_classes}], got {k}")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise EvalError("labels length must match score rows")
    # lexsort: primary key -score (descending score), secondary class index
    class_idx = np.broadcast_to(np.arange(n_classes), scores.shape)
    order = np.lexsort((class_idx, -scores), axis=1)
    topk = order[:, :k]
    hits = np.any(topk == labels[:, None], axis=1)
    return float(np.mean(hits))


def _resample_accuracy(scores: np.ndarray, labels: np.ndarray, k: int,
                       seed: int, index: int) -> float:
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    idx = rng.integers(0, scores.shape[0], size=scores.shape[0])
    return topk_accuracy(scores[idx], labels[idx], k)


def bootstrap_accuracy(
    scores: np.ndarray,
    labels: Sequence[int],
    config: BootstrapConfig = BootstrapConfig(),
    k: int = 1,
    workers: int = 1,
) -> tuple[float, float]:
    """Mean and sample standard deviation of top-k accuracy over
    nonparametric bootstrap resamples of the test set (resample size =
    test size). Deterministic per seed regardless of worker count."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            accs = list(
                pool.map(
                    lambda i: _resample_accuracy(scores, labels, k, config.seed, i),
                    range(config.resamples),
                )
            )
    else:
        accs = [
            _resample_accuracy(scores, labels, k, config.seed, i)
            for i in range(config.resamples)
        ]
    accs = np.array(accs)
    std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
    return float(np.mean(accs)), std


def aggregate_kshot(
    accuracies: Sequence[float], expected_runs: int = 3, ddof: int = 1
) -> tuple[float, float]:
    """Mean and (by default sample) standard deviation over the per-seed
    k-shot runs. Errors when a seed run is missing."""
    if len(accuracies) != expected_runs:
        raise EvalError(
            f"expected {expected_runs} seed runs, got {len(accuracies)}"
        )
    arr = np.asarray(accuracies, dtype=np.float64)
    std = float(np.std(arr, ddof=ddof)) if len(arr) > ddof else 0.0
    return float(np.mean(arr)), std


def format_cell(mean: float, std: float) -> str:
    """Render one metric cell as "mean (std)" with two decimals."""
    return f"{mean:.2f} ({std:.2f})"


def render_report(report: EvalReport, format: str = "table-text") -> str:
    """Render a report as a fixed-layout text table or as JSON."""
    if format == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if format != "table-text":
        raise EvalError(f"unknown report format {format!r}")
    headers = ["Setting", "Top-1", "Top-3"]
    body = [
        [row.setting, format_cell(row.top1_mean, row.top1_std),
         format_cell(row.top3_mean, row.top3_std)]
        for row in report.rows
    ]
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h)
              for i, h in enumerate(headers)]
    lines = [f"Experiment: {report.experiment_id}"]
    lines.append("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)


def report_from_json(document: str) -> EvalReport:
    return EvalReport.from_dict(json.loads(document))


def write_report_csv(report: EvalReport, path: str | Path) -> None:
    """Delimited output: one row per setting with raw means/stds."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["setting", "top1_mean", "top1_std", "top3_mean", "top3_std"])
        for row in report.rows:
            writer.writerow([row.setting, f"{row.top1_mean:.6f}", f"{row.top1_std:.6f}",
                             f"{row.top3_mean:.6f}", f"{row.top3_std:.6f}"])
