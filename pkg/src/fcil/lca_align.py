"""Local classifier alignment.

All heads (or a selected subset) are retrained jointly on features
sampled from the stored class Gaussians.  The loss per class is the
mean cross-entropy over that class's samples plus lambda times the
loss dispersion, the mean absolute difference of losses over ordered
pairs of distinct same-class samples; the total averages the per-class
losses uniformly.  The dispersion term penalizes unstable predictions
around each class prototype.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn_core as nn
from .cil_pipeline import PipelineState, ProgressiveClassifier, TrainingConfig
from .class_gaussians import sample_class
from .errors import StateError

HEAD_SUBSET_MODES = ("all", "recent_half")


@dataclass(frozen=True)
class LcaConfig:
    lam: float = 0.1
    per_class: int = 512
    epochs: int = 10
    batch_size: int = 128
    head_subset: str = "all"  # "all" | "recent_half" | comma list of head indices
    resample: str = "epoch"  # "epoch": fresh draws per epoch; "fixed": one draw

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.per_class < 2:
            raise ValueError("per_class must be >= 2: the dispersion term needs pairs")
        if self.resample not in ("epoch", "fixed"):
            raise ValueError(f"unknown resample mode {self.resample!r}")
        if self.head_subset not in HEAD_SUBSET_MODES:
            try:
                indices = tuple(int(s) for s in self.head_subset.split(","))
            except ValueError:
                raise ValueError(
                    f"head_subset must be one of {HEAD_SUBSET_MODES} or a comma list of indices"
                ) from None
            if len(set(indices)) != len(indices):
                raise ValueError("duplicate head index in head_subset")


def resolve_head_subset(selector: str, n_heads: int) -> tuple[int, ...]:
    if selector == "all":
        return tuple(range(n_heads))
    if selector == "recent_half":
        keep = -(-n_heads // 2)  # ceil(t/2) most recent heads
        return tuple(range(n_heads - keep, n_heads))
    indices = tuple(int(s) for s in selector.split(","))
    for i in indices:
        if not 0 <= i < n_heads:
            raise ValueError(f"head index {i} out of range for {n_heads} heads")
    return indices


def dispersion(losses: np.ndarray) -> float:
    """Mean |l_a - l_b| over ordered pairs a != b.

    Equals (2 / (n (n-1))) * sum_{a<b} |l_a - l_b|; invariant under
    permutation of the input.
    """
    v = np.asarray(losses, dtype=np.float64).ravel()
    n = v.size
    if n < 2:
        raise ValueError("dispersion needs at least two losses")
    diffs = np.abs(v[:, None] - v[None, :])
    return float(diffs.sum() / (n * (n - 1)))


def _dispersion_sign_sums(losses: np.ndarray) -> np.ndarray:
    """For each a: sum over b != a of sign(l_a - l_b), with sign(0) = 0."""
    order = np.sort(losses)
    below = np.searchsorted(order, losses, side="left")
    above = losses.size - np.searchsorted(order, losses, side="right")
    return below.astype(np.float64) - above.astype(np.float64)


@dataclass
class LcaLossBreakdown:
    per_class_mean: dict[int, float]
    per_class_dispersion: dict[int, float]
    per_class_total: dict[int, float]
    total: float
    class_count: int
    lam: float


def lca_loss(
    classifier: ProgressiveClassifier,
    features: np.ndarray,
    labels: np.ndarray,
    lam: float,
) -> tuple[LcaLossBreakdown, list[np.ndarray]]:
    """Alignment loss on a labeled sample set, with per-head gradients.

    Losses are softmax cross-entropy over the concatenated logits of all
    heads; gradients flow to every head.  Every class present must have
    at least two samples.  |.| takes subgradient 0 at exact ties.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    logits, caches = classifier.logits_cached(features)
    positions = classifier.positions(labels)
    losses = nn.per_sample_cross_entropy(logits, positions)

    # group rows by class: within each segment, losses ascend
    order = np.lexsort((losses, labels))
    seg_labels = labels[order]
    v = losses[order]
    uniq, starts, counts = np.unique(seg_labels, return_index=True, return_counts=True)
    if counts.min() < 2:
        c = int(uniq[np.argmin(counts)])
        raise ValueError(f"class {c} has {int(counts.min())} sample(s); dispersion needs >= 2")
    n_classes = len(uniq)
    counts_rep = np.repeat(counts, counts)
    pos_in_seg = np.arange(v.size) - np.repeat(starts, counts)
    # for ascending v: sum_{a<b}(v_b - v_a) = sum_i (2i - n + 1) v_(i) per segment
    rank_coeff = 2.0 * pos_in_seg - counts_rep + 1.0
    pair_sums = np.add.reduceat(rank_coeff * v, starts)
    disp = 2.0 * pair_sums / (counts * (counts - 1.0))
    means = np.add.reduceat(v, starts) / counts
    per_cls = means + lam * disp
    total = float(per_cls.mean())

    # sign sums: with no within-class ties the rank coefficient already is
    # (#less - #greater); tied runs share (#less - #greater) of the run
    ties = (np.diff(v) == 0.0) & (np.diff(seg_labels) == 0)
    if not ties.any():
        sign_sums = rank_coeff
    else:
        sign_sums = np.empty_like(v)
        for i, start in enumerate(starts):
            seg = v[start : start + counts[i]]
            below = np.searchsorted(seg, seg, side="left")
            above = counts[i] - np.searchsorted(seg, seg, side="right")
            sign_sums[start : start + counts[i]] = below - above

    # d(total)/d(loss_a) for sample a of class i with n_i samples:
    # (1/C) * (1/n_i + lam * 2/(n_i (n_i - 1)) * sign_sum_a)
    weights = np.empty_like(v)
    weights[order] = (
        1.0 / counts_rep + lam * (2.0 / (counts_rep * (counts_rep - 1.0))) * sign_sums
    ) / n_classes

    probs = nn.softmax(logits)
    probs[np.arange(len(positions)), positions] -= 1.0
    d_logits = weights[:, None] * probs
    grads = classifier.backward_heads(caches, d_logits)
    breakdown = LcaLossBreakdown(
        {int(c): float(m) for c, m in zip(uniq, means)},
        {int(c): float(d) for c, d in zip(uniq, disp)},
        {int(c): float(t) for c, t in zip(uniq, per_cls)},
        total,
        n_classes,
        lam,
    )
    return breakdown, grads


def _sample_pool_array(bank, class_ids, per_class: int, rng: np.random.Generator) -> np.ndarray:
    """(C, per_class, dim) Gaussian draws, one slab per class, one rng call."""
    z = rng.standard_normal((len(class_ids), per_class, bank.dim))
    chols = np.stack([bank[c].chol for c in class_ids])
    means = np.stack([bank[c].mean for c in class_ids])
    return means[:, None, :] + z @ chols.transpose(0, 2, 1)


def align_classifiers(
    state: PipelineState,
    cfg: LcaConfig,
    training: TrainingConfig,
    rng: np.random.Generator,
    log_path: str | Path | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Retrain classifier heads on Gaussian-sampled features.

    The adapter and the stored Gaussians are untouched; heads outside
    the subset selector are untouched bit-exactly.  Returns the last
    sampled feature set and its labels (the training set itself when
    resample mode is "fixed").

    Batches are class-balanced: each batch draws from min(C_t,
    batch_size // 2) classes so every represented class contributes at
    least two samples.
    """
    classifier = state.classifier
    bank = state.bank
    if not classifier.heads:
        raise StateError("nothing to align: classifier has no heads")
    missing = [c for c in classifier.class_ids if c not in bank]
    if missing:
        raise StateError(f"bank lacks classes {missing} present in the classifier")

    class_ids = sorted(bank.class_ids())
    ids_arr = np.asarray(class_ids, dtype=np.int64)
    selected = resolve_head_subset(cfg.head_subset, len(classifier.heads))
    sizes = [h.params.size for h in classifier.heads]
    theta = np.concatenate([classifier.heads[i].params.values for i in selected]) if selected else None
    if theta is None or cfg.epochs == 0:
        pool_arr = _sample_pool_array(bank, class_ids, cfg.per_class, rng)
        return pool_arr.reshape(-1, bank.dim), np.repeat(ids_arr, cfg.per_class)
    # selected heads' params become views into the working vector
    offset = 0
    for i in selected:
        head = classifier.heads[i]
        head.params = nn.ParamVector(theta[offset : offset + sizes[i]], head.spec.layout())
        offset += sizes[i]

    c_t = len(class_ids)
    k = min(c_t, max(1, cfg.batch_size // 2))
    per_batch_class = max(2, cfg.batch_size // k)
    steps_per_epoch = max(1, -(-c_t * cfg.per_class // cfg.batch_size))
    opt = nn.OptimizerState(
        lr0=training.lr,
        momentum_coef=training.momentum,
        weight_decay=training.weight_decay,
        total_steps=max(1, cfg.epochs * steps_per_epoch),
        eta_min=training.eta_min,
    )

    log_rows = []
    take = min(per_batch_class, cfg.per_class)
    pool_arr = _sample_pool_array(bank, class_ids, cfg.per_class, rng)
    for epoch in range(cfg.epochs):
        if cfg.resample == "epoch" and epoch > 0:
            pool_arr = _sample_pool_array(bank, class_ids, cfg.per_class, rng)
        class_order = rng.permutation(c_t)
        cursor = 0
        for _ in range(steps_per_epoch):
            sel = class_order[(cursor + np.arange(k)) % c_t]
            cursor = (cursor + k) % c_t
            if take >= cfg.per_class:
                idx = np.tile(np.arange(cfg.per_class), (k, 1))
            else:
                # random subset without replacement per picked class
                idx = np.argpartition(rng.random((k, cfg.per_class)), take, axis=1)[:, :take]
            batch_feats = pool_arr[sel[:, None], idx].reshape(k * take, bank.dim)
            batch_labels = np.repeat(ids_arr[sel], take)
            _, grads = lca_loss(classifier, batch_feats, batch_labels, cfg.lam)
            grad = np.concatenate([grads[i] for i in selected])
            nn.sgd_step(opt, theta, grad)
        if log_path is not None:
            feats_all = pool_arr.reshape(-1, bank.dim)
            labels_all = np.repeat(ids_arr, cfg.per_class)
            breakdown, _ = lca_loss(classifier, feats_all, labels_all, cfg.lam)
            log_rows.append(
                [
                    epoch,
                    breakdown.total,
                    float(np.mean(list(breakdown.per_class_mean.values()))),
                    float(np.mean(list(breakdown.per_class_dispersion.values()))),
                    max(breakdown.per_class_total.values()),
                ]
            )

    # detach the views: heads own their parameters again
    offset = 0
    for i in selected:
        head = classifier.heads[i]
        head.params = nn.ParamVector(theta[offset : offset + sizes[i]].copy(), head.spec.layout())
        offset += sizes[i]

    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "total", "mean_term", "dispersion_term", "worst_class_loss"])
            for row in log_rows:
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])

    return pool_arr.reshape(-1, bank.dim), np.repeat(ids_arr, cfg.per_class)
