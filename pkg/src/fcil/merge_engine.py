"""Incremental merging of flat PEFT parameter vectors.

A task vector is the difference between a task-finetuned parameter
vector and the shared base.  Merging folds task vectors one at a time
into a single accumulator, keeping per coordinate either the largest
magnitude (max_abs, sign preserved), the largest signed value (max), or
the smallest signed value (min).  No trimming or sign election happens;
memory stays O(d) regardless of how many tasks were merged.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

OPERATORS = ("max_abs", "max", "min")

SNAPSHOT_MAGIC = b"FCMS"
SNAPSHOT_VERSION = 1


@dataclass
class TaskVector:
    delta: np.ndarray
    source_task: int

    def __post_init__(self) -> None:
        self.delta = np.asarray(self.delta, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.delta)):
            raise ValueError(f"task vector {self.source_task} has non-finite entries")


def task_vector(theta_task: np.ndarray, theta_base: np.ndarray, source_task: int = 0) -> TaskVector:
    """Elementwise difference of a finetuned vector from the base."""
    a = np.asarray(theta_task, dtype=np.float64).ravel()
    b = np.asarray(theta_base, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape} vs {b.shape}")
    return TaskVector(a - b, source_task)


@dataclass
class MergeState:
    """Accumulator for sequential merging.

    Holds only the running accumulator and the base vector.  The first
    merged vector is copied outright; for max_abs this matches folding
    against the zero accumulator (|v| >= 0 always), and for the signed
    min/max operators it makes the fold select over the observed task
    vectors rather than against the zero initialization.
    """

    base: np.ndarray
    operator: str = "max_abs"
    alpha: float = 1.0
    accumulator: np.ndarray = field(default=None)  # type: ignore[assignment]
    merged_count: int = 0

    def __post_init__(self) -> None:
        self.base = np.asarray(self.base, dtype=np.float64).ravel()
        if self.operator not in OPERATORS:
            raise ValueError(f"unknown merge operator {self.operator!r}; know {OPERATORS}")
        if not np.isfinite(self.alpha):
            raise ValueError("alpha must be finite")
        if self.accumulator is None:
            self.accumulator = np.zeros_like(self.base)
        else:
            self.accumulator = np.asarray(self.accumulator, dtype=np.float64).ravel()
        if self.accumulator.shape != self.base.shape:
            raise ShapeError("accumulator length must match base length")


def merge_step(state: MergeState, tv: TaskVector) -> MergeState:
    """Fold one task vector into the accumulator, in place."""
    if tv.delta.shape != state.accumulator.shape:
        raise ShapeError(
            f"task vector length {tv.delta.shape[0]} != accumulator {state.accumulator.shape[0]}"
        )
    if state.merged_count == 0:
        state.accumulator[...] = tv.delta
    elif state.operator == "max_abs":
        # ties take the current task's value
        take = np.abs(tv.delta) >= np.abs(state.accumulator)
        state.accumulator[take] = tv.delta[take]
    elif state.operator == "max":
        np.maximum(state.accumulator, tv.delta, out=state.accumulator)
    else:
        np.minimum(state.accumulator, tv.delta, out=state.accumulator)
    state.merged_count += 1
    return state


def batch_merge_oracle(vectors: list[TaskVector], operator: str) -> np.ndarray:
    """Per-coordinate selection over the whole list at once.

    Test oracle for the sequential fold: for max_abs the winner at equal
    magnitude is the latest-indexed vector, matching the >= tie rule of
    the sequential update.
    """
    if not vectors:
        raise ValueError("need at least one task vector")
    if operator not in OPERATORS:
        raise ValueError(f"unknown merge operator {operator!r}")
    stack = np.stack([tv.delta for tv in vectors])
    if operator == "max":
        return stack.max(axis=0)
    if operator == "min":
        return stack.min(axis=0)
    magnitudes = np.abs(stack)
    # last index achieving the max magnitude
    winner = stack.shape[0] - 1 - np.argmax(magnitudes[::-1], axis=0)
    return stack[winner, np.arange(stack.shape[1])]


def apply_merge(state: MergeState) -> np.ndarray:
    """Merged parameter vector: base + alpha * accumulator."""
    return state.base + state.alpha * state.accumulator


def write_merge_state(path: str | Path, state: MergeState) -> None:
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(
            struct.pack(
                "<IIdQQ",
                SNAPSHOT_VERSION,
                OPERATORS.index(state.operator),
                state.alpha,
                state.base.size,
                state.merged_count,
            )
        )
        fh.write(state.base.astype("<f8").tobytes())
        fh.write(state.accumulator.astype("<f8").tobytes())


def read_merge_state(path: str | Path) -> MergeState:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SNAPSHOT_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {SNAPSHOT_MAGIC!r}")
        header = fh.read(32)
        if len(header) != 32:
            raise FormatError("truncated merge-state header")
        version, op_idx, alpha, d, merged_count = struct.unpack("<IIdQQ", header)
        if version != SNAPSHOT_VERSION:
            raise FormatError(f"unsupported merge-state version {version}")
        base = np.frombuffer(fh.read(8 * d), dtype="<f8")
        acc = np.frombuffer(fh.read(8 * d), dtype="<f8")
        if base.size != d or acc.size != d:
            raise FormatError("truncated merge-state payload")
    return MergeState(
        base=base.copy(),
        operator=OPERATORS[op_idx],
        alpha=alpha,
        accumulator=acc.copy(),
        merged_count=merged_count,
    )
