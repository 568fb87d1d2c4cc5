"""Executable generalization-bound diagnostics.

Every quantity of the bound analysis is computable here: the clamped
(bounded) loss, the class-wise robustness terms over nearest-prototype
cells, the multinomial uncertainty term, the assembled right-hand sides,
and an importance-sampled total-variation distance between Gaussian
mixtures.  Diagnostics clamp the loss so it is bounded; the training
pipeline itself never clamps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import nn_core as nn
from .cil_pipeline import ProgressiveClassifier
from .class_gaussians import ClassGaussian, GaussianBank, sample_class
from .errors import NumericError, StateError

DEFAULT_P_MIN = 1e-6
DEFAULT_DELTA = 0.05


def loss_bound(p_min: float) -> float:
    """The supremum of the clamped loss: -ln(p_min)."""
    if not 0.0 < p_min < 1.0:
        raise ValueError(f"p_min must be in (0, 1), got {p_min}")
    return -math.log(p_min)


def clamped_losses(
    classifier: ProgressiveClassifier,
    features: np.ndarray,
    label_positions: np.ndarray,
    p_min: float = DEFAULT_P_MIN,
) -> np.ndarray:
    """Per-row cross-entropy with the true-class probability floored at p_min.

    Values lie in [0, -ln(p_min)] by construction.
    """
    logits = classifier.logits(np.asarray(features, dtype=np.float64))
    probs = nn.softmax(logits)
    p_true = probs[np.arange(len(label_positions)), np.asarray(label_positions, dtype=np.int64)]
    return -np.log(np.maximum(p_true, p_min))


def clamped_loss(
    classifier: ProgressiveClassifier,
    feature_row: np.ndarray,
    label_position: int,
    p_min: float = DEFAULT_P_MIN,
) -> float:
    return float(
        clamped_losses(classifier, np.atleast_2d(feature_row), np.array([label_position]), p_min)[0]
    )


@dataclass
class Partition:
    """Nearest-prototype-mean (Voronoi) cells, one per class."""

    means: np.ndarray  # (C, dim)
    class_ids: tuple[int, ...]

    @classmethod
    def from_bank(cls, bank: GaussianBank) -> "Partition":
        ids = tuple(sorted(bank.class_ids()))
        return cls(np.stack([bank[c].mean for c in ids]), ids)

    def assign(self, features: np.ndarray) -> np.ndarray:
        """Class id of the nearest mean per row; ties go to the lowest id."""
        x = np.asarray(features, dtype=np.float64)
        d2 = ((x[:, None, :] - self.means[None, :, :]) ** 2).sum(axis=2)
        return np.asarray(self.class_ids, dtype=np.int64)[np.argmin(d2, axis=1)]


@dataclass
class RobustnessTerms:
    per_class: dict[int, float | None]  # None: no pairs survived the cell restriction
    weighted_sum: float
    retained_fraction: dict[int, float]
    missing: tuple[int, ...] = ()


def empirical_robustness(
    classifier: ProgressiveClassifier,
    bank: GaussianBank,
    d_features: np.ndarray,
    d_labels: np.ndarray,
    mc_per_class: int,
    rng: np.random.Generator,
    p_min: float = DEFAULT_P_MIN,
    partition: Partition | None = None,
) -> RobustnessTerms:
    """Monte-Carlo class-wise robustness: mean |loss(z) - loss(s)| over
    fresh population draws z and fixed samples s, both restricted to the
    class's own cell.  Reports the fraction of pairs retained."""
    if partition is None:
        partition = Partition.from_bank(bank)
    d_features = np.asarray(d_features, dtype=np.float64)
    d_labels = np.asarray(d_labels, dtype=np.int64)
    n_total = d_labels.size
    per_class: dict[int, float | None] = {}
    retained: dict[int, float] = {}
    weighted = 0.0
    missing = []
    for c in sorted(bank.class_ids()):
        rows = np.flatnonzero(d_labels == c)
        if rows.size == 0:
            raise ValueError(f"sample set has no rows for class {c}")
        pos = classifier.position_of(c)
        z = sample_class(bank[c], mc_per_class, rng)
        z_in = z[partition.assign(z) == c]
        s = d_features[rows]
        s_in = s[partition.assign(s) == c]
        retained[c] = (z_in.shape[0] * s_in.shape[0]) / (mc_per_class * rows.size)
        if z_in.shape[0] == 0 or s_in.shape[0] == 0:
            per_class[c] = None
            missing.append(c)
            continue
        lz = clamped_losses(classifier, z_in, np.full(z_in.shape[0], pos), p_min)
        ls = clamped_losses(classifier, s_in, np.full(s_in.shape[0], pos), p_min)
        eps = float(np.abs(lz[:, None] - ls[None, :]).mean())
        per_class[c] = eps
        weighted += (rows.size / n_total) * eps
    return RobustnessTerms(per_class, weighted, retained, tuple(missing))


def uncertainty_term(c_t: int, n: int, delta: float, l_max: float) -> float:
    """l_max * sqrt((C_t ln4 + 2 ln(1/delta)) / n)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    return l_max * math.sqrt((c_t * math.log(4.0) + 2.0 * math.log(1.0 / delta)) / n)


def uncertainty_term_equal_counts(m: int, c_t: int, delta: float, l_max: float) -> float:
    """Equal-count form: l_max * sqrt(ln4/m + 2 ln(1/delta)/(m C_t))."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    return l_max * math.sqrt(math.log(4.0) / m + 2.0 * math.log(1.0 / delta) / (m * c_t))


@dataclass
class BoundReport:
    measured: float  # Monte-Carlo test loss over the bank's mixture
    training: float
    robustness_term: float
    uncertainty: float
    l_max: float
    delta: float
    class_count: int
    n: int
    retained_fraction: dict[int, float] = field(default_factory=dict)

    @property
    def rhs(self) -> float:
        return self.training + self.robustness_term + self.uncertainty

    @property
    def holds(self) -> bool:
        return self.measured <= self.rhs


def mixture_mc_loss(
    classifier: ProgressiveClassifier,
    bank: GaussianBank,
    samples_per_class: int,
    rng: np.random.Generator,
    p_min: float = DEFAULT_P_MIN,
) -> float:
    """Monte-Carlo estimate of the mean clamped loss over the uniform
    class mixture: average of per-class expected losses."""
    per_class = []
    for c in sorted(bank.class_ids()):
        z = sample_class(bank[c], samples_per_class, rng)
        pos = classifier.position_of(c)
        per_class.append(clamped_losses(classifier, z, np.full(z.shape[0], pos), p_min).mean())
    return float(np.mean(per_class))


def check_bound_thm1(
    classifier: ProgressiveClassifier,
    bank: GaussianBank,
    d_features: np.ndarray,
    d_labels: np.ndarray,
    delta: float,
    rng: np.random.Generator,
    p_min: float = DEFAULT_P_MIN,
    mc_test_per_class: int = 2000,
    mc_robustness_per_class: int = 256,
) -> BoundReport:
    """Assemble the three right-hand-side terms over a fixed sample set
    and compare against a fresh Monte-Carlo test loss."""
    d_features = np.asarray(d_features, dtype=np.float64)
    d_labels = np.asarray(d_labels, dtype=np.int64)
    l_max = loss_bound(p_min)
    n = d_labels.size
    c_t = len(bank)
    positions = classifier.positions(d_labels)
    training = float(clamped_losses(classifier, d_features, positions, p_min).mean())
    rob = empirical_robustness(
        classifier, bank, d_features, d_labels, mc_robustness_per_class, rng, p_min
    )
    unc = uncertainty_term(c_t, n, delta, l_max)
    measured = mixture_mc_loss(classifier, bank, mc_test_per_class, rng, p_min)
    return BoundReport(
        measured=measured,
        training=training,
        robustness_term=rob.weighted_sum,
        uncertainty=unc,
        l_max=l_max,
        delta=delta,
        class_count=c_t,
        n=n,
        retained_fraction=rob.retained_fraction,
    )


def _gaussian_log_density(g: ClassGaussian, x: np.ndarray) -> np.ndarray:
    """Log density of N(mean, cov + jitter I) via the stored Cholesky factor."""
    diag = np.diag(g.chol)
    if np.any(diag <= 1e-300):
        raise NumericError(
            f"class {g.class_id}: singular covariance; consider covariance shrinkage"
        )
    centered = (np.asarray(x, dtype=np.float64) - g.mean).T
    z = solve_triangular(g.chol, centered, lower=True)
    quad = (z**2).sum(axis=0)
    log_det = np.log(diag).sum()
    return -0.5 * (quad + g.dim * math.log(2.0 * math.pi)) - log_det


def mixture_log_density(bank: GaussianBank, x: np.ndarray) -> np.ndarray:
    """Log density of the uniform mixture over the bank's classes."""
    parts = np.stack([_gaussian_log_density(bank[c], x) for c in sorted(bank.class_ids())])
    peak = parts.max(axis=0)
    return peak + np.log(np.exp(parts - peak).sum(axis=0)) - math.log(len(bank))


def sample_mixture(bank: GaussianBank, n: int, rng: np.random.Generator) -> np.ndarray:
    """n draws from the uniform mixture over the bank's classes."""
    ids = sorted(bank.class_ids())
    choice = rng.integers(0, len(ids), size=n)
    out = np.empty((n, bank.dim))
    for i, c in enumerate(ids):
        rows = np.flatnonzero(choice == i)
        if rows.size:
            out[rows] = sample_class(bank[c], rows.size, rng)
    return out


@dataclass
class TvEstimate:
    tv: float
    standard_error: float
    pinsker: float | None = None  # only for single-Gaussian banks


def gaussian_kl(g0: ClassGaussian, g1: ClassGaussian) -> float:
    """KL(N0 || N1) in closed form, using the jittered covariances."""
    d = g0.dim
    cov0 = g0.chol @ g0.chol.T
    diff = g1.mean - g0.mean
    solved = cho_solve((g1.chol, True), cov0)
    quad = diff @ cho_solve((g1.chol, True), diff)
    log_det = 2.0 * (np.log(np.diag(g1.chol)).sum() - np.log(np.diag(g0.chol)).sum())
    return float(0.5 * (np.trace(solved) + quad - d + log_det))


def pinsker_bound(g0: ClassGaussian, g1: ClassGaussian) -> float:
    return math.sqrt(gaussian_kl(g0, g1) / 2.0)


def tv_estimate(
    bank_p: GaussianBank,
    bank_q: GaussianBank,
    n_samples: int,
    rng: np.random.Generator,
) -> TvEstimate:
    """Total variation between the two uniform mixtures.

    Importance sampling with the balanced mixture M = (P + Q)/2 as the
    proposal: TV = E_{z~M} |p(z) - q(z)| / (p(z) + q(z)), estimated from
    n_samples draws (half from each side) and clipped to [0, 1].  For
    single-Gaussian banks the Pinsker bound sqrt(KL/2) is also reported.
    """
    if bank_p.dim != bank_q.dim:
        raise ValueError(f"dim mismatch: {bank_p.dim} vs {bank_q.dim}")
    n_p = n_samples // 2
    x = np.concatenate(
        [sample_mixture(bank_p, n_p, rng), sample_mixture(bank_q, n_samples - n_p, rng)]
    )
    lp = mixture_log_density(bank_p, x)
    lq = mixture_log_density(bank_q, x)
    peak = np.maximum(lp, lq)
    ep = np.exp(lp - peak)
    eq = np.exp(lq - peak)
    ratios = np.abs(ep - eq) / (ep + eq)
    tv = float(np.clip(ratios.mean(), 0.0, 1.0))
    se = float(ratios.std(ddof=1) / math.sqrt(n_samples))
    pinsker = None
    if len(bank_p) == 1 and len(bank_q) == 1:
        (c_p,) = bank_p.class_ids()
        (c_q,) = bank_q.class_ids()
        pinsker = pinsker_bound(bank_p[c_p], bank_q[c_q])
    return TvEstimate(tv, se, pinsker)


@dataclass
class ShiftReport:
    tv: float
    tv_standard_error: float
    tv_term: float  # 2 * l_max * tv
    training: float
    robustness_term: float
    uncertainty: float
    measured: float  # Monte-Carlo loss over the reference mixture
    l_max: float
    delta: float
    class_count: int
    n: int
    retained_fraction: dict[int, float] = field(default_factory=dict)

    @property
    def rhs(self) -> float:
        return self.tv_term + self.training + self.robustness_term + self.uncertainty

    @property
    def holds(self) -> bool:
        return self.measured <= self.rhs


def check_bound_thm2(
    classifier: ProgressiveClassifier,
    bank_pre: GaussianBank,
    bank_post: GaussianBank,
    d_features: np.ndarray,
    d_labels: np.ndarray,
    delta: float,
    rng: np.random.Generator,
    p_min: float = DEFAULT_P_MIN,
    mc_test_per_class: int = 2000,
    mc_robustness_per_class: int = 256,
    tv_samples: int = 200_000,
) -> ShiftReport:
    """Shifted-distribution bound: the sample set is drawn from the
    post-shift bank while the measured loss runs over the pre-shift
    (reference) mixture; the gap is paid by 2 l_max TV."""
    if set(bank_pre.class_ids()) != set(bank_post.class_ids()):
        raise StateError("banks must describe the same class set")
    d_features = np.asarray(d_features, dtype=np.float64)
    d_labels = np.asarray(d_labels, dtype=np.int64)
    l_max = loss_bound(p_min)
    tv = tv_estimate(bank_pre, bank_post, tv_samples, rng)
    positions = classifier.positions(d_labels)
    training = float(clamped_losses(classifier, d_features, positions, p_min).mean())
    rob = empirical_robustness(
        classifier, bank_post, d_features, d_labels, mc_robustness_per_class, rng, p_min
    )
    unc = uncertainty_term(len(bank_post), d_labels.size, delta, l_max)
    measured = mixture_mc_loss(classifier, bank_pre, mc_test_per_class, rng, p_min)
    return ShiftReport(
        tv=tv.tv,
        tv_standard_error=tv.standard_error,
        tv_term=2.0 * l_max * tv.tv,
        training=training,
        robustness_term=rob.weighted_sum,
        uncertainty=unc,
        measured=measured,
        l_max=l_max,
        delta=delta,
        class_count=len(bank_post),
        n=d_labels.size,
        retained_fraction=rob.retained_fraction,
    )
