"""Detector calibration from coherent-state sweeps.

Two parts: per-bin diagnostics (uniformity of the mean clicks per bin and
bin-bin covariances as a cross-talk probe) and the response fit. The fit
runs on Gamma_i = -ln(1 - kbar_i / N), which is linear in (nu, eta, gamma),
so it reduces to weighted linear least squares with a closed-form
covariance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy import stats

from .errors import DomainError, SaturationError, ValidationError
from .forward_model import ResponseParams
from .statistics import ClickDistribution, moments

SIGNIFICANCE_LEVEL = 3.0
CROSSTALK_LEVEL = 5.0
PARAM_NAMES = ("nu", "eta", "gamma")

FitOrder = Literal["linear", "quadratic"]

__all__ = [
    "BinStatistics",
    "CalibrationPoint",
    "ResponseFit",
    "BinMeans",
    "BinCovariances",
    "UniformityResult",
    "gamma_from_mean_clicks",
    "mean_clicks_from_gamma",
    "fit_response",
    "fit_both_orders",
    "bin_means",
    "bin_covariances",
    "uniformity_test",
    "crosstalk_pairs",
]


def gamma_from_mean_clicks(kbar: float, n_bins: int) -> float:
    if kbar < 0:
        raise DomainError(f"mean click number must be >= 0, got {kbar}")
    if kbar >= n_bins:
        raise SaturationError(f"mean clicks {kbar} >= N={n_bins}: response exponent diverges")
    return -math.log1p(-kbar / n_bins)


def mean_clicks_from_gamma(gamma: float, n_bins: int) -> float:
    return -n_bins * math.expm1(-gamma)


@dataclass(frozen=True, eq=False)
class BinStatistics:
    """Aggregated per-bin data: click totals per bin and pairwise joint clicks.

    ``joint[j, j']`` counts shots where both bins clicked; its diagonal
    equals ``marginals``.
    """

    marginals: np.ndarray
    joint: np.ndarray
    shots: int

    def __post_init__(self):
        marg = np.asarray(self.marginals, dtype=np.int64)
        joint = np.asarray(self.joint, dtype=np.int64)
        if marg.ndim != 1 or joint.shape != (len(marg), len(marg)):
            raise ValidationError("joint counts must be N x N for N marginals")
        if not np.array_equal(np.diag(joint), marg):
            raise ValidationError("diagonal of joint counts must equal the marginals")
        if self.shots < 1:
            raise ValidationError("bin statistics need at least one shot")
        object.__setattr__(self, "marginals", marg)
        object.__setattr__(self, "joint", joint)

    @property
    def n_bins(self) -> int:
        return len(self.marginals)


@dataclass(frozen=True)
class CalibrationPoint:
    """A coherent state of independently known mean photon number and its click data.

    Analytic click vectors (``shot_count == 0``) are accepted; their
    uncertainties are then computed as if from a single shot, which only
    matters as a relative weight.
    """

    nbar: float
    clicks: ClickDistribution
    per_bin: BinStatistics | None = None

    def __post_init__(self):
        if self.nbar < 0:
            raise ValidationError("nbar must be >= 0")
        if self.per_bin is not None:
            pb = self.per_bin
            if pb.n_bins != self.clicks.n_bins or pb.shots != self.clicks.shot_count:
                raise ValidationError("per-bin data does not match the click counts")
            if self.clicks.counts is not None:
                total = int(np.arange(pb.n_bins + 1) @ self.clicks.counts)
                if int(pb.marginals.sum()) != total:
                    raise ValidationError(
                        "sum of bin marginals must equal the total number of clicks"
                    )

    @classmethod
    def from_counts(cls, nbar, counts, per_bin=None) -> "CalibrationPoint":
        return cls(nbar, ClickDistribution.from_counts(counts), per_bin)

    @property
    def n_bins(self) -> int:
        return self.clicks.n_bins

    @property
    def shots(self) -> int:
        return self.clicks.shot_count

    def mean_clicks(self) -> tuple[float, float]:
        """Mean click number and its standard error."""
        kbar, var = moments(self.clicks)
        return kbar, math.sqrt(var / max(self.shots, 1))

    def gamma(self) -> tuple[float, float]:
        """Gamma from the mean clicks, with sigma_Gamma = sigma_kbar / (N - kbar)."""
        kbar, sk = self.mean_clicks()
        g = gamma_from_mean_clicks(kbar, self.n_bins)
        return g, sk / (self.n_bins - kbar)


@dataclass(frozen=True, eq=False)
class ResponseFit:
    """Fitted response Gamma = nu + eta nbar/N + gamma (nbar/N)^2.

    ``covariance`` is (X^T W X)^-1 for a weighted fit and that matrix scaled
    by the residual variance for an unweighted one. ``std_errors`` are
    relative (sigma / |value|), matching how calibration results are usually
    quoted; ``sigma`` gives the absolute values.
    """

    nu: float
    eta: float
    gamma: float
    covariance: np.ndarray
    r_squared: float
    order: str
    n_bins: int
    weighted: bool
    chi2: float
    dof: int
    flags: tuple[str, ...] = field(default_factory=tuple)

    @property
    def values(self) -> np.ndarray:
        return np.array([self.nu, self.eta, self.gamma])

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def std_errors(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.sigma / np.abs(self.values)

    @property
    def significance(self) -> np.ndarray:
        """|value| / sigma per parameter (NaN for a parameter held fixed)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.sigma > 0, np.abs(self.values) / self.sigma, np.nan)

    def is_significant(self, name: str, level: float = SIGNIFICANCE_LEVEL) -> bool:
        z = self.significance[PARAM_NAMES.index(name)]
        return bool(z >= level)

    def predict(self, nbar) -> np.ndarray:
        x = np.asarray(nbar, dtype=float) / self.n_bins
        return self.nu + self.eta * x + self.gamma * x * x

    def to_params(self) -> ResponseParams:
        """Response parameters for simulation; a slightly negative nu is clipped to 0."""
        return ResponseParams(
            nu=max(self.nu, 0.0), eta=min(max(self.eta, 0.0), 1.0), gamma=self.gamma,
            n_bins=self.n_bins,
        )


def fit_response(
    points: Sequence[CalibrationPoint],
    order: FitOrder = "quadratic",
    weighted: bool = True,
) -> ResponseFit:
    """Least-squares fit of Gamma(nbar) to a calibration sweep.

    Needs at least four points with distinct nbar; points are sorted by
    nbar first so the result does not depend on input order.
    """
    if order not in ("linear", "quadratic"):
        raise ValidationError(f"unknown fit order {order!r}")
    if len(points) < 4:
        raise ValidationError(f"response fit needs at least 4 calibration points, got {len(points)}")
    n_bins = points[0].n_bins
    if any(p.n_bins != n_bins for p in points):
        raise ValidationError("all calibration points must share the same N")
    points = sorted(points, key=lambda p: p.nbar)

    nbar = np.array([p.nbar for p in points])
    gam, sig = np.array([p.gamma() for p in points]).T
    x = nbar / n_bins
    columns = [np.ones_like(x), x] + ([x * x] if order == "quadratic" else [])
    design = np.column_stack(columns)
    n_par = design.shape[1]
    if len(np.unique(nbar)) < 4 or np.linalg.matrix_rank(design) < n_par:
        raise ValidationError("rank-deficient calibration design: too few distinct nbar values")

    if weighted:
        if np.any(sig <= 0):
            raise DomainError("zero uncertainty on a calibration point; use weighted=False")
        w = 1.0 / sig**2
    else:
        w = np.ones_like(gam)
    sw = np.sqrt(w)
    beta, *_ = np.linalg.lstsq(design * sw[:, None], gam * sw, rcond=None)
    normal = design.T @ (design * w[:, None])
    cov = np.linalg.inv(normal)
    resid = gam - design @ beta
    dof = len(gam) - n_par
    chi2 = float(np.sum(w * resid**2))
    if not weighted:
        cov = cov * (chi2 / dof if dof > 0 else math.nan)

    full_cov = np.zeros((3, 3))
    full_cov[:n_par, :n_par] = cov
    ss_tot = float(np.sum((gam - gam.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else math.nan
    params = list(beta) + [0.0] * (3 - n_par)
    flags = []
    if params[1] < 0:
        flags.append("negative_eta")
    if params[0] < 0:
        flags.append("negative_nu")
    return ResponseFit(
        nu=float(params[0]),
        eta=float(params[1]),
        gamma=float(params[2]),
        covariance=full_cov,
        r_squared=r2,
        order=order,
        n_bins=n_bins,
        weighted=weighted,
        chi2=chi2,
        dof=dof,
        flags=tuple(flags),
    )


def fit_both_orders(points, weighted=True) -> dict:
    """Run linear and quadratic fits; report whether gamma is needed at 3 sigma."""
    lin = fit_response(points, "linear", weighted)
    quad = fit_response(points, "quadratic", weighted)
    return {
        "linear": lin,
        "quadratic": quad,
        "gamma_significant": quad.is_significant("gamma"),
    }


@dataclass(frozen=True, eq=False)
class BinMeans:
    means: np.ndarray
    sigma: np.ndarray
    shots: int


def bin_means(per_bin: BinStatistics) -> BinMeans:
    """Mean clicks per bin with Bernoulli standard errors."""
    if per_bin.shots < 1:
        raise ValidationError("need at least one shot")
    m = per_bin.marginals / per_bin.shots
    return BinMeans(m, np.sqrt(m * (1 - m) / per_bin.shots), per_bin.shots)


@dataclass(frozen=True, eq=False)
class BinCovariances:
    covariance: np.ndarray
    sigma: np.ndarray

    @property
    def z(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.sigma > 0, np.abs(self.covariance) / self.sigma, 0.0)


def bin_covariances(per_bin: BinStatistics) -> BinCovariances:
    """Sample covariances mean(k_j k_j') - mean(k_j) mean(k_j') and their standard errors.

    The error of each entry is sqrt((E[a^2 b^2] - cov^2) / shots) with
    a, b the centred bin indicators, evaluated from the pair's joint
    outcome probabilities.
    """
    shots = per_bin.shots
    if shots < 2:
        raise ValidationError("covariances need at least two shots")
    m = per_bin.marginals / shots
    p11 = per_bin.joint / shots
    mj, mk = m[:, None], m[None, :]
    cov = p11 - mj * mk
    p10 = mj - p11
    p01 = mk - p11
    p00 = 1.0 - mj - mk + p11
    fourth = (
        p11 * (1 - mj) ** 2 * (1 - mk) ** 2
        + p10 * (1 - mj) ** 2 * mk**2
        + p01 * mj**2 * (1 - mk) ** 2
        + p00 * mj**2 * mk**2
    )
    sigma = np.sqrt(np.clip(fourth - cov**2, 0.0, None) / shots)
    return BinCovariances(cov, sigma)


def crosstalk_pairs(cov: BinCovariances, level: float = CROSSTALK_LEVEL) -> list[tuple[int, int, float]]:
    """Off-diagonal pairs (j < j') whose covariance exceeds ``level`` sigma."""
    z = cov.z
    n = z.shape[0]
    out = []
    for j in range(n):
        for k in range(j + 1, n):
            degenerate = cov.sigma[j, k] == 0 and cov.covariance[j, k] != 0
            if z[j, k] > level or degenerate:
                out.append((j, k, float(z[j, k]) if not degenerate else math.inf))
    return out


@dataclass(frozen=True)
class UniformityResult:
    chi2: float
    dof: int
    p_value: float
    flag: str = ""


def uniformity_test(means: BinMeans) -> UniformityResult:
    """Chi-square of the bin means against their inverse-variance pooled mean."""
    m, s = np.asarray(means.means, float), np.asarray(means.sigma, float)
    n = len(m)
    if n < 2:
        raise ValidationError("uniformity test needs at least two bins")
    dof = n - 1
    if np.any(s <= 0):
        if np.ptp(m) == 0:
            return UniformityResult(0.0, dof, 1.0, "degenerate")
        return UniformityResult(math.inf, dof, 0.0, "degenerate")
    w = 1.0 / s**2
    pooled = float(np.sum(w * m) / np.sum(w))
    chi2 = float(np.sum(w * (m - pooled) ** 2))
    return UniformityResult(chi2, dof, float(stats.chi2.sf(chi2, dof)))
