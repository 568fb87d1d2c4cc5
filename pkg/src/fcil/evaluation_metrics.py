"""Accuracy and robustness bookkeeping.

A_t is the global accuracy over all classes seen after task t (the
per-task unweighted mean is logged alongside); AA is the mean of the
A_t.  The robustness score averages the corruption-grid mean accuracy
and the perturbation-walk mean accuracy.

CSV schemas:
    accuracy matrix: after_task, eval_task, accuracy
    summary:         after_task, a_t, per_task_mean
    robustness grid: kind, severity, accuracy
    perturbations:   kind, step, accuracy
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .feature_store import (
    CORRUPTION_KINDS,
    CorruptionSpec,
    PerturbationSpec,
    corrupt,
    default_corruption_suite,
    default_perturbation_suite,
    perturbation_walk,
)


@dataclass
class AccuracyMatrix:
    """Lower-triangular A[t][j]: accuracy on task j's test split after task t."""

    entries: list[list[float]]
    a_t: list[float]
    per_task_mean: list[float]

    def __post_init__(self) -> None:
        for t, row in enumerate(self.entries):
            if len(row) != t + 1:
                raise ValueError(f"row {t} must have {t + 1} entries, has {len(row)}")
            for v in row:
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"accuracy {v} outside [0, 1]")

    @property
    def aa(self) -> float:
        return average_accuracy(self.a_t)


def average_accuracy(a_values: Sequence[float]) -> float:
    """AA: arithmetic mean of the per-stage accuracies A_1..A_T."""
    if len(a_values) == 0:
        raise ValueError("need at least one stage accuracy")
    return float(np.mean(a_values))


def corruption_accuracy(grid: dict[str, Sequence[float]]) -> float:
    """Mean accuracy over the full corruption-kind x severity grid."""
    if not grid:
        raise ValueError("empty corruption grid")
    widths = {len(v) for v in grid.values()}
    if len(widths) != 1:
        raise ValueError("ragged corruption grid: every kind needs the same severity count")
    return float(np.mean([list(v) for v in grid.values()]))


def perturbation_accuracy(per_type: dict[str, Sequence[float]]) -> float:
    """Mean over perturbation types of the mean per-step accuracy."""
    if not per_type:
        raise ValueError("no perturbation types")
    for kind, accs in per_type.items():
        if len(accs) == 0:
            raise ValueError(f"perturbation {kind!r} has no step accuracies")
    return float(np.mean([np.mean(list(v)) for v in per_type.values()]))


def robustness(acc_c: float, acc_p: float) -> float:
    return 0.5 * (acc_c + acc_p)


@dataclass
class RobustnessReport:
    grid: dict[str, list[float]]  # kind -> accuracy per severity 1..5
    per_perturbation: dict[str, list[float]]  # kind -> accuracy per walk step
    clean_accuracy: float
    acc_c: float = field(init=False)
    acc_p: float = field(init=False)
    score: float = field(init=False)
    severity5_accuracy: float = field(init=False)

    def __post_init__(self) -> None:
        self.acc_c = corruption_accuracy(self.grid)
        self.acc_p = perturbation_accuracy(self.per_perturbation)
        self.score = robustness(self.acc_c, self.acc_p)
        self.severity5_accuracy = float(np.mean([v[-1] for v in self.grid.values()]))


@dataclass
class MetricsReport:
    """One run's results: accuracy matrix plus optional robustness block."""

    matrix: AccuracyMatrix
    robustness: RobustnessReport | None = None


def evaluate_robustness(
    state,
    features: np.ndarray,
    labels: np.ndarray,
    seed: int,
    corruption_kinds: Sequence[str] = CORRUPTION_KINDS,
    perturbations: Sequence[PerturbationSpec] | None = None,
) -> RobustnessReport:
    """Fill the corruption grid and run the perturbation walks on a test set."""
    from .cil_pipeline import concat_inference

    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if perturbations is None:
        perturbations = default_perturbation_suite()

    def accuracy(x: np.ndarray) -> float:
        _, preds = concat_inference(x, state)
        return float(np.mean(preds == labels))

    clean = accuracy(features)
    grid: dict[str, list[float]] = {}
    for kind in corruption_kinds:
        grid[kind] = [
            accuracy(corrupt(features, CorruptionSpec(kind, s), seed)) for s in range(1, 6)
        ]
    per_perturbation: dict[str, list[float]] = {}
    for spec in perturbations:
        walked = perturbation_walk(features, spec, seed)
        per_perturbation[spec.kind] = [accuracy(walked[k]) for k in range(spec.steps)]
    return RobustnessReport(grid, per_perturbation, clean)


def write_accuracy_csv(path: str | Path, matrix: AccuracyMatrix) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["after_task", "eval_task", "accuracy"])
        for t, row in enumerate(matrix.entries):
            for j, v in enumerate(row):
                writer.writerow([t, j, repr(float(v))])


def write_summary_csv(path: str | Path, matrix: AccuracyMatrix) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["after_task", "a_t", "per_task_mean"])
        for t, (a, m) in enumerate(zip(matrix.a_t, matrix.per_task_mean)):
            writer.writerow([t, repr(float(a)), repr(float(m))])
        writer.writerow(["aa", repr(matrix.aa), ""])


def write_robustness_csv(path: str | Path, report: RobustnessReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "severity", "accuracy"])
        writer.writerow(["clean", 0, repr(report.clean_accuracy)])
        for kind, accs in report.grid.items():
            for s, v in enumerate(accs, start=1):
                writer.writerow([kind, s, repr(float(v))])
        writer.writerow(["acc_c", "", repr(report.acc_c)])
        writer.writerow(["acc_p", "", repr(report.acc_p)])
        writer.writerow(["robustness", "", repr(report.score)])


def write_perturbation_csv(path: str | Path, report: RobustnessReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "step", "accuracy"])
        for kind, accs in report.per_perturbation.items():
            for k, v in enumerate(accs, start=1):
                writer.writerow([kind, k, repr(float(v))])
