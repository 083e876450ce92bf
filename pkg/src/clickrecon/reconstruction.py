"""Pseudo-inversion of click statistics and loss deconvolution.

The pseudo-inverse C+ maps an (N+1)-entry click distribution to a
pseudo-photon-number distribution over m = 0 .. N. It is exact for states
without photons above N. Loss is then removed on the same (N+1)-dimensional
space with H(1/r); because H is upper triangular this truncation is
self-consistent.

Negative entries are kept and reported, never clipped unless asked for.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .combinatorics import binomial, stirling_first_table, table_bound
from .errors import ConditioningWarning, DomainError, ValidationError
from .forward_model import (
    ChannelMatrix,
    MatrixRole,
    apply_channel,
    loss_matrix,
)
from .statistics import (
    DEFAULT_RESAMPLES,
    ClickDistribution,
    PhotonDistribution,
    QEstimate,
    bootstrap_replicates,
    q_binomial,
    q_from_covariance,
    q_mandel,
    q_statistic,
)

DEFAULT_WARN_RATIO = 0.25

__all__ = [
    "ReconstructionReport",
    "NegativityReport",
    "pseudo_inverse_matrix",
    "pseudo_invert",
    "deconvolve_loss",
    "negativity_report",
    "clamp",
    "deconvolution_condition_number",
]


@lru_cache(maxsize=32)
def _pseudo_inverse_entries(n_bins: int) -> np.ndarray:
    s1 = stirling_first_table(table_bound(n_bins))
    out = np.zeros((n_bins + 1, n_bins + 1))
    for k in range(n_bins + 1):
        denom = binomial(n_bins, k) * math.factorial(k)
        for m in range(k + 1):
            out[m, k] = float(Fraction(n_bins**m * s1[k][m], denom))
    out.setflags(write=False)
    return out


def pseudo_inverse_matrix(n_bins: int) -> ChannelMatrix:
    """C+[m, k] = binom(N, k)^-1 N^m / k! s(k, m), rows pseudo-photon number m, columns clicks k."""
    if n_bins < 1:
        raise ValidationError("n_bins must be >= 1")
    return ChannelMatrix(
        _pseudo_inverse_entries(int(n_bins)),
        MatrixRole.PSEUDO_INVERSE,
        row_meaning="pseudo-photon number m",
        col_meaning="total clicks k",
        n_bins=int(n_bins),
    )


@dataclass(frozen=True)
class NegativityReport:
    """Total negative mass, the most negative entry and its largest significance.

    ``significance`` is max |p_n| / sigma_n over the negative entries and is
    None when no uncertainties are available.
    """

    neg_mass: float
    worst_index: int | None
    significance: float | None

    @property
    def negative(self) -> bool:
        return self.neg_mass < 0


def negativity_report(p: PhotonDistribution) -> NegativityReport:
    values = p.values
    neg = values < 0
    if not np.any(neg):
        return NegativityReport(0.0, None, None)
    neg_mass = math.fsum(values[neg])
    worst = int(np.argmin(values))
    significance = None
    sigma = p.sigma
    if sigma is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.abs(values[neg]) / sigma[neg]
        significance = float(np.max(z))
    return NegativityReport(neg_mass, worst, significance)


@dataclass(frozen=True)
class ReconstructionReport:
    """Click input, pseudo-photon-number output and the diagnostics of one inversion.

    Q estimates are None when the input carries no shot counts; for
    pseudo-photon distributions Q_B uses the detector's N.
    """

    input: ClickDistribution
    output: PhotonDistribution
    negativity: NegativityReport
    q_mandel: QEstimate | None = None
    q_binomial: QEstimate | None = None
    click_q_mandel: QEstimate | None = None
    click_q_binomial: QEstimate | None = None
    notes: tuple[str, ...] = field(default_factory=tuple)


def _analytic_q(kind, d, n_bins=None) -> QEstimate:
    try:
        q = q_mandel(d) if kind == "mandel" else q_binomial(d, n_bins)
    except DomainError:
        return QEstimate(math.nan, math.nan, kind, "undefined")
    return QEstimate(q, math.nan, kind, "no_counts")


def pseudo_invert(
    c: ClickDistribution,
    eta: float = 1.0,
    n_bins: int | None = None,
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    workers: int = 1,
) -> ReconstructionReport:
    """Apply C+ to ``c`` and collect Q parameters and negativity.

    ``eta`` is the detector efficiency the output refers to (it is not
    removed here). With shot counts, Q sigmas come from one bootstrap of
    the counts; the entry covariance is the plug-in multinomial covariance
    pushed through C+.
    """
    if n_bins is not None and n_bins != c.n_bins:
        raise ValidationError(f"click distribution has N={c.n_bins}, expected N={n_bins}")
    cplus = pseudo_inverse_matrix(c.n_bins)
    out = apply_channel(cplus, c, eta_tag=eta)
    n = c.n_bins

    if c.counts is None or c.shot_count < 2:
        return ReconstructionReport(
            c,
            out,
            negativity_report(out),
            q_mandel=_analytic_q("mandel", out),
            q_binomial=_analytic_q("binomial", out, n),
            click_q_mandel=_analytic_q("mandel", c),
            click_q_binomial=_analytic_q("binomial", c, n),
        )

    stats = {
        "q_mandel": q_statistic("mandel", n, cplus.entries),
        "q_binomial": q_statistic("binomial", n, cplus.entries),
        "click_q_mandel": q_statistic("mandel", n),
        "click_q_binomial": q_statistic("binomial", n),
    }
    names = list(stats)

    def all_stats(freqs):
        return np.stack([stats[name](freqs) for name in names], axis=1)

    point = all_stats(c.values[None, :])[0]
    degenerate = np.count_nonzero(c.counts) < 2
    if degenerate:
        reps = None
    else:
        reps = bootstrap_replicates(c.counts, all_stats, resamples, seed, workers)
    estimates = {}
    for i, name in enumerate(names):
        kind = "mandel" if name.endswith("mandel") else "binomial"
        q = float(point[i])
        if degenerate:
            estimates[name] = QEstimate(q, math.nan, kind, "degenerate_counts")
            continue
        col = reps[:, i]
        col = col[np.isfinite(col)]
        if not math.isfinite(q) or len(col) < 2:
            estimates[name] = QEstimate(q, math.nan, kind, "undefined")
        else:
            estimates[name] = QEstimate(q, float(np.std(col, ddof=1)), kind)
    return ReconstructionReport(c, out, negativity_report(out), **estimates)


def deconvolution_condition_number(eta_from: float, eta_to: float, dim: int) -> float:
    """2-norm condition number of the inverse loss map on ``dim + 1`` photon numbers."""
    return float(np.linalg.cond(loss_matrix(Fraction(eta_to) / Fraction(eta_from), dim).entries))


def deconvolve_loss(
    p: PhotonDistribution,
    eta_to: float = 1.0,
    eta_from: float | None = None,
    warn_ratio: float = DEFAULT_WARN_RATIO,
    clamp_output: bool = False,
) -> PhotonDistribution:
    """Remove loss: map a distribution at efficiency ``eta_from`` to ``eta_to``.

    ``eta_from`` defaults to ``p.eta_tag``. The map is H(1/r) with
    r = eta_from / eta_to, applied on the distribution's own support.
    Raises DomainError when ``eta_to < eta_from`` (this would add loss) and
    warns when r < ``warn_ratio``.
    """
    eta_from = p.eta_tag if eta_from is None else eta_from
    if not 0 < eta_from <= 1 or not 0 < eta_to <= 1:
        raise DomainError(f"efficiencies must lie in (0, 1], got {eta_from} -> {eta_to}")
    if eta_to < eta_from:
        raise DomainError(
            f"cannot deconvolve to a lower efficiency ({eta_from} -> {eta_to}); use loss_matrix"
        )
    if eta_to == eta_from:
        return PhotonDistribution(
            p.values,
            eta_tag=eta_to,
            pseudo=p.pseudo,
            deconvolved=p.deconvolved,
            tail_mass=p.tail_mass,
            covariance=p.covariance,
        )
    ratio = eta_from / eta_to
    if ratio < warn_ratio:
        warnings.warn(
            f"efficiency ratio {ratio:.3g} < {warn_ratio}: inverse loss map has entries "
            f"up to |1 - 1/r|^n = {abs(1 - 1 / ratio):.3g}^n; expect amplified noise",
            ConditioningWarning,
            stacklevel=2,
        )
    inverse = loss_matrix(Fraction(eta_to) / Fraction(eta_from), len(p.values) - 1)
    out = apply_channel(inverse, p, eta_tag=eta_to)
    if clamp_output:
        out = clamp(out)
    return out


def clamp(p: PhotonDistribution) -> PhotonDistribution:
    """Clip negative entries at zero and renormalize; for plotting only."""
    values = np.clip(p.values, 0.0, None)
    total = values.sum()
    if not total > 0:
        raise DomainError("nothing left after clipping negative entries")
    return PhotonDistribution(
        values / total, eta_tag=p.eta_tag, pseudo=p.pseudo, deconvolved=p.deconvolved
    )


def deconvolved_q(p: PhotonDistribution, n_bins: int | None = None) -> dict[str, QEstimate]:
    """Q_M (and Q_B when ``n_bins`` is given) with sigmas from the entry covariance."""
    out = {"q_mandel": q_from_covariance(p, "mandel")}
    if n_bins is not None:
        out["q_binomial"] = q_from_covariance(p, "binomial", n_bins)
    return out
