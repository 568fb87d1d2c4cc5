"""Per-class Gaussian statistics and feature replay.

Each encountered class is summarized by the empirical mean and the
biased (divide-by-K) covariance of its features; sampling draws
mu + L z with L the Cholesky factor of the jittered covariance.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError

JITTER_LADDER = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)

BANK_MAGIC = b"FCGB"
BANK_VERSION = 1


@dataclass
class ClassGaussian:
    class_id: int
    mean: np.ndarray  # (dim,)
    cov: np.ndarray  # (dim, dim), symmetric PSD
    chol: np.ndarray  # lower triangular, cov + jitter*I = chol @ chol.T
    jitter: float
    count: int  # rows the statistics were fitted on

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])


@dataclass
class GaussianBank:
    """Ordered class-id -> ClassGaussian map sharing one feature dim."""

    dim: int
    members: dict[int, ClassGaussian] = field(default_factory=dict)

    def add(self, g: ClassGaussian) -> None:
        if g.dim != self.dim:
            raise ValueError(f"class {g.class_id} has dim {g.dim}, bank has {self.dim}")
        if g.class_id in self.members:
            raise ValueError(f"class {g.class_id} already in bank")
        self.members[g.class_id] = g

    def class_ids(self) -> list[int]:
        return list(self.members)

    def __len__(self) -> int:
        return len(self.members)

    def __getitem__(self, class_id: int) -> ClassGaussian:
        return self.members[class_id]

    def __contains__(self, class_id: int) -> bool:
        return class_id in self.members

    def means(self) -> np.ndarray:
        return np.stack([g.mean for g in self.members.values()])


def _cholesky_with_jitter(cov: np.ndarray) -> tuple[np.ndarray, float]:
    for jitter in JITTER_LADDER:
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0])), jitter
        except np.linalg.LinAlgError:
            continue
    raise NumericError(
        f"Cholesky failed up to jitter {JITTER_LADDER[-1]}; covariance is badly conditioned"
    )


def fit_single_class(features: np.ndarray, class_id: int, shrinkage: float = 0.0) -> ClassGaussian:
    """Mean and biased covariance of one class's rows.

    Rows are put in a canonical (lexicographic) order before the sums so
    the result is exactly invariant to the incoming row order.
    """
    rows = np.asarray(features, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ValueError(f"class {class_id}: need a non-empty row matrix")
    order = np.lexsort(rows.T[::-1])
    rows = rows[order]
    k = rows.shape[0]
    mean = rows.sum(axis=0) / k
    centered = rows - mean
    cov = centered.T @ centered / k
    cov = 0.5 * (cov + cov.T)
    if shrinkage > 0.0:
        dim = cov.shape[0]
        cov = (1.0 - shrinkage) * cov + shrinkage * (np.trace(cov) / dim) * np.eye(dim)
    chol, jitter = _cholesky_with_jitter(cov)
    return ClassGaussian(int(class_id), mean, cov, chol, jitter, k)


def fit_class_stats(
    features: np.ndarray,
    labels: np.ndarray,
    class_ids=None,
    shrinkage: float = 0.0,
) -> GaussianBank:
    """Fit one Gaussian per requested class (default: all classes present)."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if class_ids is None:
        class_ids = np.unique(labels)
    bank = GaussianBank(dim=int(features.shape[1]))
    for c in class_ids:
        rows = features[labels == c]
        if rows.shape[0] == 0:
            raise ValueError(f"class {int(c)} has no rows to fit")
        bank.add(fit_single_class(rows, int(c), shrinkage))
    return bank


def sample_class(g: ClassGaussian, m: int, rng: np.random.Generator) -> np.ndarray:
    """Draw m rows from N(mean, cov + jitter I); deterministic in the stream."""
    if m < 1:
        raise ValueError("need at least one sample")
    z = rng.normal(size=(m, g.dim))
    return g.mean + z @ g.chol.T


def sample_alignment_batchset(
    bank: GaussianBank, per_class: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Exactly per_class rows from every class, labeled with global ids.

    The dispersion term of the alignment loss needs same-class pairs, so
    per_class must be at least 2.
    """
    if per_class < 2:
        raise ValueError(f"per_class must be >= 2, got {per_class}")
    if len(bank) == 0:
        return np.empty((0, bank.dim)), np.empty(0, dtype=np.int64)
    feats = []
    labels = []
    for c in sorted(bank.class_ids()):
        feats.append(sample_class(bank[c], per_class, rng))
        labels.append(np.full(per_class, c, dtype=np.int64))
    return np.concatenate(feats), np.concatenate(labels)


def write_bank(path: str | Path, bank: GaussianBank) -> None:
    """Serialize: header then per class (id u32, K u64, mean f64, tril cov f64)."""
    dim = bank.dim
    tril = np.tril_indices(dim)
    with open(path, "wb") as fh:
        fh.write(BANK_MAGIC)
        fh.write(struct.pack("<III", BANK_VERSION, dim, len(bank)))
        for c in sorted(bank.class_ids()):
            g = bank[c]
            fh.write(struct.pack("<IQ", c, g.count))
            fh.write(g.mean.astype("<f8").tobytes())
            fh.write(g.cov[tril].astype("<f8").tobytes())


def read_bank(path: str | Path) -> GaussianBank:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != BANK_MAGIC:
            raise FormatError(f"bad magic {magic!r} at byte 0, expected {BANK_MAGIC!r}")
        header = fh.read(12)
        if len(header) != 12:
            raise FormatError("truncated bank header")
        version, dim, n_classes = struct.unpack("<III", header)
        if version != BANK_VERSION:
            raise FormatError(f"unsupported bank version {version}")
        tril = np.tril_indices(dim)
        n_tril = dim * (dim + 1) // 2
        bank = GaussianBank(dim=dim)
        for _ in range(n_classes):
            rec = fh.read(12)
            if len(rec) != 12:
                raise FormatError(f"truncated class record at byte {fh.tell() - len(rec)}")
            class_id, count = struct.unpack("<IQ", rec)
            mean = np.frombuffer(fh.read(8 * dim), dtype="<f8")
            packed = np.frombuffer(fh.read(8 * n_tril), dtype="<f8")
            if mean.size != dim or packed.size != n_tril:
                raise FormatError(f"truncated class payload at byte {fh.tell()}")
            cov = np.zeros((dim, dim))
            cov[tril] = packed
            cov = cov + np.tril(cov, -1).T
            chol, jitter = _cholesky_with_jitter(cov)
            bank.add(ClassGaussian(class_id, mean.copy(), cov, chol, jitter, count))
    return bank
