"""Probability vectors, moments and the Mandel / binomial Q parameters.

The two distribution types are immutable value objects. Normalization is
checked on construction (tolerance ``NORM_TOL``) and never repaired
silently. Photon distributions may carry signed entries only when they are
flagged as pseudo-inverted or loss-deconvolved.

Uncertainties come from a nonparametric bootstrap over shots, i.e.
multinomial resampling of the click counts. A delta-method estimate is
available as a cross-check.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from .errors import DomainError, ValidationError

NORM_TOL = 1e-9
VARIANCE_CLAMP = 1e-12
DEFAULT_RESAMPLES = 1000
# Resamples are drawn in fixed-size blocks, each from its own child seed, so
# the result does not depend on how blocks are spread over workers.
BOOTSTRAP_BLOCK = 250

QKind = Literal["mandel", "binomial"]

__all__ = [
    "NORM_TOL",
    "PhotonDistribution",
    "ClickDistribution",
    "QEstimate",
    "moments",
    "q_mandel",
    "q_binomial",
    "q_uncertainty",
    "bootstrap_replicates",
    "delta_sigma",
    "q_statistic",
    "q_from_covariance",
    "total_variation",
]


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    if arr.ndim != 1 or arr.size == 0:
        raise ValidationError("distribution values must be a non-empty 1-D vector")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PhotonDistribution:
    """Probabilities over photon numbers ``n = 0 .. n_max``.

    ``tail_mass`` is the probability beyond ``n_max`` that was cut off by
    truncation; the entries plus the tail must sum to one. ``eta_tag``
    records the detection efficiency the distribution refers to (1.0 means
    lossless). ``covariance`` optionally holds the estimated covariance of
    the entries; it propagates exactly through linear channel maps.
    """

    values: np.ndarray
    eta_tag: float = 1.0
    pseudo: bool = False
    deconvolved: bool = False
    tail_mass: float = 0.0
    covariance: np.ndarray | None = None

    def __post_init__(self):
        values = _frozen_array(self.values)
        object.__setattr__(self, "values", values)
        if not np.all(np.isfinite(values)):
            raise ValidationError("photon distribution contains non-finite entries")
        if not (self.eta_tag > 0):
            raise ValidationError(f"eta_tag must be positive, got {self.eta_tag}")
        if self.tail_mass < 0:
            raise ValidationError("tail_mass must be nonnegative")
        total = math.fsum(values) + self.tail_mass
        if abs(total - 1.0) > NORM_TOL:
            raise ValidationError(
                f"photon distribution not normalized: sum = {total!r} (tolerance {NORM_TOL})"
            )
        if not self.signed and np.any(values < 0):
            raise ValidationError(
                "negative photon probabilities are only allowed for pseudo-inverted "
                "or deconvolved distributions"
            )
        if self.covariance is not None:
            cov = np.array(self.covariance, dtype=float, copy=True)
            if cov.shape != (len(values), len(values)):
                raise ValidationError("covariance must be square with one row per entry")
            cov = 0.5 * (cov + cov.T)
            cov.setflags(write=False)
            object.__setattr__(self, "covariance", cov)

    @property
    def sigma(self) -> np.ndarray | None:
        if self.covariance is None:
            return None
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def signed(self) -> bool:
        return self.pseudo or self.deconvolved

    @property
    def n_max(self) -> int:
        return len(self.values) - 1

    def __len__(self):
        return len(self.values)

    def __eq__(self, other):
        if not isinstance(other, PhotonDistribution):
            return NotImplemented
        return (
            np.array_equal(self.values, other.values)
            and self.eta_tag == other.eta_tag
            and self.pseudo == other.pseudo
            and self.deconvolved == other.deconvolved
            and self.tail_mass == other.tail_mass
            and _optional_equal(self.covariance, other.covariance)
        )


@dataclass(frozen=True, eq=False)
class ClickDistribution:
    """Probabilities over total clicks ``k = 0 .. N`` of an N-bin detector.

    ``shot_count`` is 0 for analytic vectors. Empirical distributions keep
    their integer ``counts`` so uncertainties can be bootstrapped later.
    """

    values: np.ndarray
    n_bins: int
    shot_count: int = 0
    counts: np.ndarray | None = field(default=None)

    def __post_init__(self):
        values = _frozen_array(self.values)
        object.__setattr__(self, "values", values)
        if self.n_bins < 1 or len(values) != self.n_bins + 1:
            raise ValidationError(
                f"click distribution for N={self.n_bins} needs {self.n_bins + 1} entries, "
                f"got {len(values)}"
            )
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValidationError("click probabilities must be finite and nonnegative")
        total = math.fsum(values)
        if abs(total - 1.0) > NORM_TOL:
            raise ValidationError(
                f"click distribution not normalized: sum = {total!r} (tolerance {NORM_TOL})"
            )
        if self.counts is not None:
            counts = _frozen_array(self.counts, dtype=np.int64)
            if counts.shape != values.shape or int(counts.sum()) != self.shot_count:
                raise ValidationError("counts must match values and sum to shot_count")
            object.__setattr__(self, "counts", counts)

    @classmethod
    def from_counts(cls, counts) -> "ClickDistribution":
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 1 or np.any(counts < 0):
            raise ValidationError("counts must be a 1-D nonnegative integer vector")
        shots = int(counts.sum())
        if shots < 1:
            raise ValidationError("need at least one shot")
        return cls(counts / shots, n_bins=len(counts) - 1, shot_count=shots, counts=counts)

    @property
    def n_max(self) -> int:
        return self.n_bins

    def __len__(self):
        return len(self.values)

    def __eq__(self, other):
        if not isinstance(other, ClickDistribution):
            return NotImplemented
        return (
            np.array_equal(self.values, other.values)
            and self.n_bins == other.n_bins
            and self.shot_count == other.shot_count
            and _optional_equal(self.counts, other.counts)
        )


def _optional_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b, equal_nan=True)


def _values(d) -> np.ndarray:
    if isinstance(d, (PhotonDistribution, ClickDistribution)):
        return d.values
    return np.asarray(d, dtype=float)


def moments(d) -> tuple[float, float]:
    """Mean and variance of a distribution over 0, 1, 2, ...

    Round-off negatives of the variance down to -1e-12 are clamped to 0.
    """
    p = _values(d)
    x = np.arange(len(p), dtype=float)
    mean = math.fsum(x * p)
    variance = math.fsum(x * x * p) - mean * mean
    if -VARIANCE_CLAMP <= variance < 0:
        variance = 0.0
    return mean, variance


def _q_from_moments(mean, second, kind: QKind, n_bins=None):
    """Vectorized Q from first and second raw moments; NaN where undefined."""
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(second, dtype=float) - mean * mean
    var = np.where((var < 0) & (var >= -VARIANCE_CLAMP), 0.0, var)
    with np.errstate(divide="ignore", invalid="ignore"):
        if kind == "mandel":
            q = np.where(mean > 0, var / mean - 1.0, np.nan)
        else:
            ok = (mean > 0) & (mean < n_bins)
            q = np.where(ok, n_bins * var / (mean * (n_bins - mean)) - 1.0, np.nan)
    return q


def q_mandel(d) -> float:
    """Mandel parameter, variance / mean - 1. Zero for Poisson statistics."""
    mean, var = moments(d)
    if not mean > 0:
        raise DomainError(f"Mandel parameter undefined for mean {mean!r} <= 0")
    return var / mean - 1.0


def q_binomial(d, n_bins: int | None = None) -> float:
    """Binomial parameter N var / (mean (N - mean)) - 1. Zero for binomial statistics.

    ``n_bins`` defaults to ``d.n_bins`` for click distributions. Passing it
    explicitly lets the parameter be evaluated on a photon-number
    distribution, whose support may extend past N.
    """
    if n_bins is None:
        if not isinstance(d, ClickDistribution):
            raise ValidationError("n_bins is required unless d is a ClickDistribution")
        n_bins = d.n_bins
    mean, var = moments(d)
    if not 0 < mean < n_bins:
        raise DomainError(f"binomial parameter undefined for mean {mean!r} outside (0, {n_bins})")
    return n_bins * var / (mean * (n_bins - mean)) - 1.0


def total_variation(a, b) -> float:
    """Half the L1 distance; the shorter vector is padded with zeros."""
    pa, pb = _values(a), _values(b)
    size = max(len(pa), len(pb))
    pa = np.pad(pa, (0, size - len(pa)))
    pb = np.pad(pb, (0, size - len(pb)))
    return 0.5 * math.fsum(np.abs(pa - pb))


@dataclass(frozen=True)
class QEstimate:
    """A Q value with its 1-sigma uncertainty.

    ``flag`` is empty when both numbers are meaningful; otherwise it is a
    short code such as ``"degenerate_counts"`` and the affected number is NaN.
    """

    q: float
    sigma: float
    kind: str
    flag: str = ""

    @property
    def significance(self) -> float:
        if not (self.sigma > 0):
            return math.nan
        return abs(self.q) / self.sigma


def bootstrap_replicates(
    counts,
    statistic: Callable[[np.ndarray], np.ndarray],
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    workers: int = 1,
) -> np.ndarray:
    """Evaluate ``statistic`` on multinomial resamples of ``counts``.

    ``statistic`` receives a (B, K) array of resampled relative frequencies
    and returns an array with leading dimension B. Resample ``i`` depends
    only on ``(seed, i)``, never on ``workers``.
    """
    counts = np.asarray(counts, dtype=np.int64)
    total = int(counts.sum())
    if total < 1:
        raise ValidationError("bootstrap needs at least one shot")
    if resamples < 2:
        raise ValidationError("bootstrap needs at least two resamples")
    probs = counts / total
    n_blocks = -(-resamples // BOOTSTRAP_BLOCK)
    children = np.random.SeedSequence(seed).spawn(n_blocks)

    def run_block(b):
        size = min(BOOTSTRAP_BLOCK, resamples - b * BOOTSTRAP_BLOCK)
        rng = np.random.Generator(np.random.PCG64(children[b]))
        draws = rng.multinomial(total, probs, size=size)
        return np.asarray(statistic(draws / total))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run_block, range(n_blocks)))
    else:
        parts = [run_block(b) for b in range(n_blocks)]
    return np.concatenate(parts, axis=0)


def _moment_weights(n_outcomes: int, transform: np.ndarray | None):
    x = np.arange(n_outcomes if transform is None else transform.shape[0], dtype=float)
    w1, w2 = x, x * x
    if transform is not None:
        w1, w2 = transform.T @ w1, transform.T @ w2
    return w1, w2


def q_statistic(kind: QKind, n_bins: int | None = None, transform: np.ndarray | None = None):
    """Vectorized Q of (optionally linearly transformed) frequency rows.

    With ``transform`` = M the statistic is Q of M @ f, which is how the
    uncertainty of a pseudo-inverted distribution is bootstrapped.
    """

    def stat(freqs):
        freqs = np.atleast_2d(freqs)
        w1, w2 = _moment_weights(freqs.shape[1], transform)
        return _q_from_moments(freqs @ w1, freqs @ w2, kind, n_bins)

    return stat


def delta_sigma(counts, kind: QKind, n_bins: int | None = None, transform=None) -> float:
    """First-order (delta-method) standard error of Q from multinomial counts."""
    counts = np.asarray(counts, dtype=float)
    shots = counts.sum()
    f = counts / shots
    w1, w2 = _moment_weights(len(f), transform)
    m1, m2 = f @ w1, f @ w2
    v = m2 - m1 * m1
    if kind == "mandel":
        if not m1 > 0:
            return math.nan
        d1, d2 = -m2 / m1**2 - 1.0, 1.0 / m1
    else:
        den = m1 * (n_bins - m1)
        if not den > 0:
            return math.nan
        d1 = n_bins * (-2.0 * m1 * den - v * (n_bins - 2.0 * m1)) / den**2
        d2 = n_bins / den
    g = d1 * w1 + d2 * w2
    var_g = f @ (g * g) - (f @ g) ** 2
    return math.sqrt(max(var_g, 0.0) / shots)


def q_uncertainty(
    counts,
    which: QKind,
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    n_bins: int | None = None,
    transform: np.ndarray | None = None,
    method: Literal["bootstrap", "delta"] = "bootstrap",
    workers: int = 1,
) -> QEstimate:
    """Q parameter of empirical counts with a bootstrap (or delta-method) sigma.

    ``n_bins`` defaults to ``len(counts) - 1``. Counts concentrated in a
    single outcome give ``sigma = nan`` with flag ``"degenerate_counts"``.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1 or np.any(counts < 0):
        raise ValidationError("counts must be a 1-D nonnegative integer vector")
    if counts.sum() < 2:
        raise ValidationError("need at least two shots for an uncertainty")
    if which not in ("mandel", "binomial"):
        raise ValidationError(f"unknown Q parameter {which!r}")
    if n_bins is None:
        n_bins = len(counts) - 1
    stat = q_statistic(which, n_bins, transform)
    q = float(stat(counts / counts.sum())[0])
    if np.count_nonzero(counts) < 2:
        return QEstimate(q, math.nan, which, "degenerate_counts")
    if not math.isfinite(q):
        return QEstimate(q, math.nan, which, "undefined")
    if method == "delta":
        return QEstimate(q, delta_sigma(counts, which, n_bins, transform), which)
    reps = bootstrap_replicates(counts, stat, resamples, seed, workers)
    reps = reps[np.isfinite(reps)]
    if len(reps) < 2:
        return QEstimate(q, math.nan, which, "undefined")
    return QEstimate(q, float(np.std(reps, ddof=1)), which)


def q_from_covariance(d: PhotonDistribution, kind: QKind, n_bins: int | None = None) -> QEstimate:
    """Q of a distribution with sigma from its entry covariance (first-order propagation)."""
    if kind == "mandel":
        q = q_mandel(d)
    else:
        q = q_binomial(d, n_bins)
    if d.covariance is None:
        return QEstimate(q, math.nan, kind, "no_covariance")
    x = np.arange(len(d.values), dtype=float)
    m1, m2 = d.values @ x, d.values @ (x * x)
    v = m2 - m1 * m1
    if kind == "mandel":
        d1, d2 = -m2 / m1**2 - 1.0, 1.0 / m1
    else:
        den = m1 * (n_bins - m1)
        d1 = n_bins * (-2.0 * m1 * den - v * (n_bins - 2.0 * m1)) / den**2
        d2 = n_bins / den
    g = d1 * x + d2 * x * x
    return QEstimate(q, math.sqrt(max(float(g @ d.covariance @ g), 0.0)), kind)
