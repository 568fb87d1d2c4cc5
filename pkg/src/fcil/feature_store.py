"""Dataset ingestion and generation.

Binary feature-file format (little-endian throughout):

    magic    "FCIL"        4 bytes
    version  u32           = 1
    dim      u32
    rows     u64
    classes  u32
    tasks    u32
    table    (class u32, task u32) x classes
    rows     (feature f32 x dim, label u32, task u32) x rows

Features are 32-bit on disk and widened to float64 in memory; datasets
coerce features through float32 on construction so that a write/read
round trip is the identity.  Label spaces of different tasks must be
disjoint; any violation is rejected at load, never repaired.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from .errors import FormatError, ValidationError

MAGIC = b"FCIL"
FORMAT_VERSION = 1

CORRUPTION_KINDS = (
    "gaussian_noise",
    "uniform_noise",
    "feature_dropout",
    "scale_shift",
    "interpolation_blur",
)

# severity 1..5 magnitudes; identity (severity 0) is the clean baseline
DEFAULT_MAGNITUDES: dict[str, tuple[float, ...]] = {
    "gaussian_noise": (0.1, 0.2, 0.4, 0.8, 1.6),
    "uniform_noise": tuple(s * math.sqrt(3.0) for s in (0.1, 0.2, 0.4, 0.8, 1.6)),
    "feature_dropout": (0.05, 0.1, 0.2, 0.3, 0.5),
    "scale_shift": (0.05, 0.1, 0.2, 0.35, 0.5),
    "interpolation_blur": (0.1, 0.2, 0.4, 0.6, 0.8),
}

PERTURBATION_KINDS = ("gaussian_walk", "uniform_walk", "drift_walk")
WALK_STEPS = 10
WALK_STEP_SCALE = 0.05


@dataclass
class FeatureDataset:
    """Labeled feature rows partitioned into disjoint-label tasks."""

    features: np.ndarray  # (N, dim) float64, f32-representable
    labels: np.ndarray  # (N,) int64 global class ids
    task_ids: np.ndarray  # (N,) int64
    class_to_task: dict[int, int]

    def __post_init__(self) -> None:
        feats = np.asarray(self.features)
        # round-trip through f32: the on-disk precision is the dataset's precision
        self.features = feats.astype(np.float32).astype(np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.task_ids = np.asarray(self.task_ids, dtype=np.int64)
        self.class_to_task = {int(c): int(t) for c, t in self.class_to_task.items()}
        self._validate()

    def _validate(self) -> None:
        n = self.features.shape[0]
        if n < 1:
            raise ValidationError("dataset must contain at least one row")
        if self.features.ndim != 2:
            raise ValidationError("features must be a 2-D matrix")
        if self.labels.shape != (n,) or self.task_ids.shape != (n,):
            raise ValidationError("labels/task_ids length must match feature rows")
        bad = np.flatnonzero(~np.isfinite(self.features).all(axis=1))
        if bad.size:
            raise ValidationError(f"non-finite features at row {int(bad[0])}")
        for i, (label, task) in enumerate(zip(self.labels, self.task_ids)):
            c, t = int(label), int(task)
            if c not in self.class_to_task:
                raise ValidationError(f"row {i}: class {c} missing from class/task table")
            if self.class_to_task[c] != t:
                raise ValidationError(
                    f"class {c} appears in task {t} but is assigned to task "
                    f"{self.class_to_task[c]}: task label spaces must be disjoint"
                )

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_rows(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_classes(self) -> int:
        return len(self.class_to_task)

    @property
    def n_tasks(self) -> int:
        return len(set(self.class_to_task.values()))


@dataclass
class TaskEntry:
    task: int
    class_ids: tuple[int, ...]
    train_rows: np.ndarray
    test_rows: np.ndarray


@dataclass
class TaskSplit:
    """Ordered task list with per-task class ids and train/test row indices."""

    tasks: list[TaskEntry] = field(default_factory=list)

    def validate(self, dataset: FeatureDataset) -> None:
        seen: dict[int, int] = {}
        for entry in self.tasks:
            for c in entry.class_ids:
                if c in seen:
                    raise ValidationError(f"class {c} assigned to tasks {seen[c]} and {entry.task}")
                seen[c] = entry.task
            overlap = np.intersect1d(entry.train_rows, entry.test_rows)
            if overlap.size:
                raise ValidationError(
                    f"task {entry.task}: row {int(overlap[0])} in both train and test"
                )
        if set(seen) != set(dataset.class_to_task):
            raise ValidationError("split classes do not cover the dataset's classes")


def write_features(path: str | Path, dataset: FeatureDataset) -> None:
    """Write a dataset in the FCIL binary format."""
    classes = sorted(dataset.class_to_task)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(
            struct.pack(
                "<IIQII",
                FORMAT_VERSION,
                dataset.dim,
                dataset.n_rows,
                len(classes),
                dataset.n_tasks,
            )
        )
        table = np.empty((len(classes), 2), dtype="<u4")
        table[:, 0] = classes
        table[:, 1] = [dataset.class_to_task[c] for c in classes]
        fh.write(table.tobytes())
        row_dtype = np.dtype([("f", "<f4", (dataset.dim,)), ("y", "<u4"), ("t", "<u4")])
        rows = np.empty(dataset.n_rows, dtype=row_dtype)
        rows["f"] = dataset.features.astype(np.float32)
        rows["y"] = dataset.labels
        rows["t"] = dataset.task_ids
        fh.write(rows.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file at byte {fh.tell() - len(data)}: expected {what}")
    return data


def read_features(path: str | Path) -> FeatureDataset:
    """Read an FCIL file; validation failures are raised, never repaired."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r} at byte 0, expected {MAGIC!r}")
        version, dim, n_rows, n_classes, n_tasks = struct.unpack(
            "<IIQII", _read_exact(fh, 24, "header")
        )
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {version} at byte 4")
        table_raw = np.frombuffer(
            _read_exact(fh, 8 * n_classes, "class/task table"), dtype="<u4"
        ).reshape(n_classes, 2)
        class_to_task = {int(c): int(t) for c, t in table_raw}
        if len(class_to_task) != n_classes:
            raise FormatError("duplicate class id in class/task table")
        row_dtype = np.dtype([("f", "<f4", (dim,)), ("y", "<u4"), ("t", "<u4")])
        rows = np.frombuffer(
            _read_exact(fh, row_dtype.itemsize * n_rows, f"{n_rows} rows"), dtype=row_dtype
        )
        trailing = fh.read(1)
        if trailing:
            raise FormatError(f"trailing bytes at byte {fh.tell() - 1}")
    return FeatureDataset(
        features=rows["f"].astype(np.float64),
        labels=rows["y"].astype(np.int64),
        task_ids=rows["t"].astype(np.int64),
        class_to_task=class_to_task,
    )


def write_manifest(path: str | Path, dataset: FeatureDataset) -> None:
    """Plain-text task -> class-id listing for human inspection."""
    by_task: dict[int, list[int]] = {}
    for c, t in sorted(dataset.class_to_task.items()):
        by_task.setdefault(t, []).append(c)
    with open(path, "w") as fh:
        fh.write(f"dim {dataset.dim} rows {dataset.n_rows}\n")
        for t in sorted(by_task):
            fh.write(f"task {t}: {' '.join(str(c) for c in by_task[t])}\n")


def _class_directions(n: int, dim: int) -> np.ndarray:
    """Low-discrepancy unit directions: Halton points mapped through the
    inverse normal CDF and normalized."""
    halton = qmc.Halton(d=dim, scramble=False)
    halton.fast_forward(1)  # index 0 is the origin, which ndtri cannot map
    u = halton.random(n)
    g = ndtri(u)
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def generate_synthetic(
    seed: int,
    tasks: int,
    classes_per_task: int,
    dim: int,
    per_class_train: int,
    per_class_test: int,
    separation: float,
    within_class_scale: float,
) -> tuple[FeatureDataset, TaskSplit]:
    """Gaussian-mixture benchmark with disjoint per-task label blocks.

    Class means sit quasi-uniformly on the sphere of radius ``separation``;
    each class has a random SPD covariance with trace dim, scaled by
    ``within_class_scale`` squared.  Pure function of its arguments.
    """
    from .rng import stream

    if tasks < 1 or classes_per_task < 2 or dim < 2:
        raise ValueError("need tasks >= 1, classes_per_task >= 2, dim >= 2")
    n_classes = tasks * classes_per_task
    means = separation * _class_directions(n_classes, dim)
    per_class = per_class_train + per_class_test
    feats = np.empty((n_classes * per_class, dim))
    labels = np.empty(n_classes * per_class, dtype=np.int64)
    task_ids = np.empty_like(labels)
    split = TaskSplit()
    class_to_task = {}
    for c in range(n_classes):
        t = c // classes_per_task
        class_to_task[c] = t
        cov_rng = stream(seed, "cov", c)
        a = cov_rng.normal(size=(dim, dim))
        spd = a @ a.T + 0.1 * np.eye(dim)
        spd *= dim / np.trace(spd)
        chol = np.linalg.cholesky(spd)
        z = stream(seed, "samples", c).normal(size=(per_class, dim))
        rows = means[c] + within_class_scale * (z @ chol.T)
        lo = c * per_class
        feats[lo : lo + per_class] = rows
        labels[lo : lo + per_class] = c
        task_ids[lo : lo + per_class] = t
    for t in range(tasks):
        class_ids = tuple(range(t * classes_per_task, (t + 1) * classes_per_task))
        train_rows = []
        test_rows = []
        for c in class_ids:
            lo = c * per_class
            train_rows.append(np.arange(lo, lo + per_class_train))
            test_rows.append(np.arange(lo + per_class_train, lo + per_class))
        split.tasks.append(
            TaskEntry(t, class_ids, np.concatenate(train_rows), np.concatenate(test_rows))
        )
    dataset = FeatureDataset(feats, labels, task_ids, class_to_task)
    split.validate(dataset)
    return dataset, split


@dataclass(frozen=True)
class CorruptionSpec:
    """One corruption kind at a severity in 1..5."""

    kind: str
    severity: int
    magnitudes: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}; know {CORRUPTION_KINDS}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")
        if not self.magnitudes:
            object.__setattr__(self, "magnitudes", DEFAULT_MAGNITUDES[self.kind])
        if len(self.magnitudes) != 5:
            raise ValueError("magnitude table needs 5 severities")
        increasing = all(b > a for a, b in zip(self.magnitudes, self.magnitudes[1:]))
        all_zero = all(m == 0.0 for m in self.magnitudes)  # identity table is allowed
        if not increasing and not all_zero:
            raise ValueError("magnitudes must strictly increase with severity")

    @property
    def magnitude(self) -> float:
        return self.magnitudes[self.severity - 1]


def corrupt(features: np.ndarray, spec: CorruptionSpec, seed: int) -> np.ndarray:
    """Apply a corruption i.i.d. per row; output shape equals input shape."""
    from .rng import stream

    x = np.asarray(features, dtype=np.float64)
    rng = stream(seed, "corrupt", spec.kind, spec.severity)
    m = spec.magnitude
    if spec.kind == "gaussian_noise":
        return x + m * rng.normal(size=x.shape)
    if spec.kind == "uniform_noise":
        return x + rng.uniform(-m, m, size=x.shape)
    if spec.kind == "feature_dropout":
        mask = rng.random(x.shape) >= m
        return x * mask
    if spec.kind == "scale_shift":
        scale = 1.0 + m * rng.uniform(-1.0, 1.0, size=(x.shape[0], 1))
        shift = m * rng.normal(size=(x.shape[0], 1))
        return scale * x + shift
    if spec.kind == "interpolation_blur":
        # 3-tap moving average along the feature axis, edges replicated
        padded = np.concatenate([x[:, :1], x, x[:, -1:]], axis=1)
        smooth = (padded[:, :-2] + padded[:, 1:-1] + padded[:, 2:]) / 3.0
        return (1.0 - m) * x + m * smooth
    raise ValueError(f"unknown corruption kind {spec.kind!r}")


@dataclass(frozen=True)
class PerturbationSpec:
    """A sequential noise walk: small steps accumulated from the clean row."""

    kind: str
    steps: int = WALK_STEPS
    step_scale: float = WALK_STEP_SCALE

    def __post_init__(self) -> None:
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}; know {PERTURBATION_KINDS}")
        if self.steps < 1:
            raise ValueError("walk needs at least one step")


def perturbation_walk(features: np.ndarray, spec: PerturbationSpec, seed: int) -> np.ndarray:
    """Return the (steps, N, dim) stack of progressively perturbed features."""
    from .rng import stream

    x = np.asarray(features, dtype=np.float64)
    rng = stream(seed, "perturb", spec.kind)
    out = np.empty((spec.steps,) + x.shape)
    current = x.copy()
    if spec.kind == "drift_walk":
        direction = rng.normal(size=x.shape)
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    for k in range(spec.steps):
        if spec.kind == "gaussian_walk":
            current = current + spec.step_scale * rng.normal(size=x.shape)
        elif spec.kind == "uniform_walk":
            bound = spec.step_scale * math.sqrt(3.0)
            current = current + rng.uniform(-bound, bound, size=x.shape)
        else:
            current = current + spec.step_scale * direction
        out[k] = current
    return out


def default_corruption_suite() -> list[CorruptionSpec]:
    return [CorruptionSpec(kind, s) for kind in CORRUPTION_KINDS for s in range(1, 6)]


def default_perturbation_suite() -> list[PerturbationSpec]:
    return [PerturbationSpec(kind) for kind in PERTURBATION_KINDS]
