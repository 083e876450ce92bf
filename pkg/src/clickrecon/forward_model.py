"""Forward model: from light to clicks.

Covers the coherent-state click distribution, the photon-to-click
conversion matrix built from Stirling numbers of the second kind, the
binomial loss map, the detector response function and a seedable per-shot
Monte-Carlo sampler.

Matrix conventions
------------------
``conversion_matrix(N, n_max)`` has rows indexed by total clicks ``k`` and
columns by photon number ``n``. ``loss_matrix(eta, dim)`` has rows indexed
by the output photon number and columns by the input photon number; it is
upper triangular. Both are column-stochastic.
"""
from __future__ import annotations

import enum
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Iterator, Literal

import numpy as np
from scipy import stats

from .combinatorics import binomial, stirling_second_table, table_bound
from .errors import DomainError, ModelMismatchWarning, TailMassWarning, ValidationError
from .statistics import ClickDistribution, PhotonDistribution

# CODATA 2018; both exact by the 2019 SI definition.
PLANCK_CONSTANT = 6.62607015e-34  # J s
SPEED_OF_LIGHT = 299_792_458.0  # m / s

TAIL_WARN = 1e-6
TAIL_LEAK = 1e-10
SHOT_CHUNK = 1 << 16

__all__ = [
    "PLANCK_CONSTANT",
    "SPEED_OF_LIGHT",
    "ResponseParams",
    "MatrixRole",
    "ChannelMatrix",
    "ShotRecord",
    "ShotBatch",
    "response_gamma",
    "coherent_click_distribution",
    "conversion_matrix",
    "loss_matrix",
    "apply_channel",
    "poisson_distribution",
    "default_n_max",
    "sample_shots",
    "photon_flux",
]


@dataclass(frozen=True)
class ResponseParams:
    """Detector response Gamma(nbar) = nu + eta nbar/N + gamma (nbar/N)^2."""

    nu: float = 0.0
    eta: float = 1.0
    gamma: float = 0.0
    n_bins: int = 4

    def __post_init__(self):
        if self.n_bins < 1:
            raise ValidationError("n_bins must be >= 1")
        if self.nu < 0:
            raise ValidationError(f"dark-count rate nu must be >= 0, got {self.nu}")
        if not 0 <= self.eta <= 1:
            raise ValidationError(f"efficiency eta must lie in [0, 1], got {self.eta}")


def response_gamma(p: ResponseParams, nbar: float) -> float:
    if nbar < 0:
        raise DomainError(f"mean photon number must be >= 0, got {nbar}")
    x = nbar / p.n_bins
    value = p.nu + p.eta * x + p.gamma * x * x
    if value < 0:
        raise DomainError(
            f"response Gamma({nbar}) = {value} is negative for nu={p.nu}, eta={p.eta}, "
            f"gamma={p.gamma}"
        )
    return value


def coherent_click_distribution(p: ResponseParams, nbar: float) -> ClickDistribution:
    """Click statistics of a coherent state: binomial with P(click) = 1 - exp(-Gamma)."""
    g = response_gamma(p, nbar)
    n = p.n_bins
    no_click = math.exp(-g)
    click = -math.expm1(-g)
    k = np.arange(n + 1)
    comb = np.array([math.comb(n, int(j)) for j in k], dtype=float)
    values = comb * no_click ** (n - k) * click**k
    return ClickDistribution(values, n_bins=n)


class MatrixRole(str, enum.Enum):
    CONVERSION = "conversion_C"
    PSEUDO_INVERSE = "pseudo_inverse_Cplus"
    LOSS = "loss_H"


@dataclass(frozen=True, eq=False)
class ChannelMatrix:
    """A dense linear map between probability vectors, tagged with its role.

    ``n_bins`` is set for the conversion matrix and its pseudo-inverse,
    ``eta`` for loss maps.
    """

    entries: np.ndarray
    role: MatrixRole
    row_meaning: str
    col_meaning: str
    n_bins: int | None = None
    eta: float | None = None

    @property
    def shape(self):
        return self.entries.shape

    def __matmul__(self, other):
        other = other.entries if isinstance(other, ChannelMatrix) else other
        return self.entries @ other


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@lru_cache(maxsize=64)
def _conversion_entries(n_bins: int, n_max: int) -> np.ndarray:
    s2 = stirling_second_table(table_bound(n_bins, n_max))
    out = np.zeros((n_bins + 1, n_max + 1))
    for k in range(n_bins + 1):
        prefactor = binomial(n_bins, k) * math.factorial(k)
        for n in range(k, n_max + 1):
            out[k, n] = float(Fraction(prefactor * s2[n][k], n_bins**n))
    return _readonly(out)


def conversion_matrix(n_bins: int, n_max: int) -> ChannelMatrix:
    """Photon-to-click matrix C[k, n] = binom(N, k) k! / N^n {n k}.

    Entries are assembled as exact rationals and rounded once.
    """
    if n_bins < 1:
        raise ValidationError("n_bins must be >= 1")
    if n_max < n_bins:
        raise ValidationError(f"n_max ({n_max}) must be >= n_bins ({n_bins})")
    return ChannelMatrix(
        _conversion_entries(int(n_bins), int(n_max)),
        MatrixRole.CONVERSION,
        row_meaning="total clicks k",
        col_meaning="photon number n",
        n_bins=int(n_bins),
    )


@lru_cache(maxsize=128)
def _loss_entries(eta: Fraction, dim: int) -> np.ndarray:
    out = np.zeros((dim + 1, dim + 1))
    keep, lose = eta, 1 - eta
    for m in range(dim + 1):
        for n in range(m + 1):
            out[n, m] = float(binomial(m, n) * keep**n * lose ** (m - n))
    return _readonly(out)


def loss_matrix(eta: float | Fraction, dim: int) -> ChannelMatrix:
    """Binomial loss map H(eta)[n, m] = binom(m, n) eta^n (1-eta)^(m-n), shape (dim+1)^2.

    ``eta > 1`` gives the inverse map H(1/eta)^-1 used for deconvolution.
    ``eta`` is converted to an exact rational (a float is taken at its exact
    binary value) so each entry is rounded exactly once.
    """
    if not eta > 0:
        raise DomainError(f"loss map needs eta > 0, got {eta}")
    if dim < 0:
        raise ValidationError("dim must be >= 0")
    exact = eta if isinstance(eta, Fraction) else Fraction(float(eta))
    return ChannelMatrix(
        _loss_entries(exact, int(dim)),
        MatrixRole.LOSS,
        row_meaning="output photon number n",
        col_meaning="input photon number m",
        eta=float(eta),
    )


def apply_channel(m: ChannelMatrix, d, eta_tag: float | None = None):
    """Push a distribution through a channel matrix.

    * conversion C: PhotonDistribution -> ClickDistribution
    * loss H(eta): PhotonDistribution -> PhotonDistribution, eta_tag multiplied by eta
    * pseudo-inverse C+: ClickDistribution -> pseudo PhotonDistribution tagged ``eta_tag``
    """
    if m.role is MatrixRole.PSEUDO_INVERSE:
        if not isinstance(d, ClickDistribution):
            raise ValidationError("the pseudo-inverse acts on click distributions")
        _check_dims(m, d)
        values = m.entries @ d.values
        cov = None
        if d.counts is not None:
            f = d.values
            multinomial = (np.diag(f) - np.outer(f, f)) / d.shot_count
            cov = m.entries @ multinomial @ m.entries.T
        return PhotonDistribution(
            values, eta_tag=1.0 if eta_tag is None else eta_tag, pseudo=True, covariance=cov
        )

    if not isinstance(d, PhotonDistribution):
        raise ValidationError(f"{m.role.value} acts on photon distributions")
    _check_dims(m, d)
    # pseudo-photon spaces are closed under H (upper triangular); only a
    # recorded truncation tail can leak.
    if not d.pseudo and d.tail_mass > TAIL_LEAK:
        warnings.warn(
            f"input was truncated at n_max={d.n_max} with tail mass {d.tail_mass:.3g}; "
            "increase n_max",
            TailMassWarning,
            stacklevel=2,
        )
    values = m.entries @ d.values

    if m.role is MatrixRole.CONVERSION:
        if d.signed:
            raise ValidationError("conversion matrix expects a physical photon distribution")
        total = math.fsum(values)
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(
                f"click vector sums to {total!r}: truncation tail too large for n_max={d.n_max}"
            )
        return ClickDistribution(values, n_bins=m.n_bins)

    new_tag = d.eta_tag * m.eta if eta_tag is None else eta_tag
    cov = None
    if d.covariance is not None:
        cov = m.entries @ d.covariance @ m.entries.T
    return PhotonDistribution(
        values,
        eta_tag=new_tag,
        pseudo=d.pseudo,
        deconvolved=d.deconvolved or m.eta > 1,
        tail_mass=d.tail_mass,
        covariance=cov,
    )


def _check_dims(m: ChannelMatrix, d) -> None:
    if m.shape[1] != len(d.values):
        raise ValidationError(
            f"dimension mismatch: {m.role.value} has {m.shape[1]} columns, "
            f"distribution has {len(d.values)} entries"
        )


def default_n_max(nbar: float, n_bins: int) -> int:
    """Truncation used when none is given: max(4 nbar N, 30)."""
    return max(math.ceil(4 * nbar * n_bins), 30)


def poisson_distribution(nbar: float, n_max: int, eta_tag: float = 1.0) -> PhotonDistribution:
    """Poisson photon statistics truncated at ``n_max``; the cut-off tail is kept in ``tail_mass``."""
    if nbar < 0:
        raise DomainError(f"mean photon number must be >= 0, got {nbar}")
    if n_max < 0:
        raise ValidationError("n_max must be >= 0")
    n = np.arange(n_max + 1)
    if nbar == 0:
        values = (n == 0).astype(float)
        tail = 0.0
    else:
        values = stats.poisson.pmf(n, nbar)
        tail = float(stats.poisson.sf(n_max, nbar))
    if tail > TAIL_WARN:
        warnings.warn(
            f"Poisson({nbar}) truncated at n_max={n_max} drops tail mass {tail:.3g}",
            TailMassWarning,
            stacklevel=2,
        )
    return PhotonDistribution(values, eta_tag=eta_tag, tail_mass=tail)


@dataclass(frozen=True)
class ShotRecord:
    """One trigger: which of the N bins clicked."""

    shot_id: int
    pattern: tuple[bool, ...]


@dataclass(frozen=True, eq=False)
class ShotBatch:
    """A block of shots stored as arrays: ids (S,) and click patterns (S, N)."""

    shot_ids: np.ndarray
    patterns: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.shot_ids, dtype=np.int64)
        pats = np.asarray(self.patterns, dtype=bool)
        if pats.ndim != 2 or ids.shape != (pats.shape[0],):
            raise ValidationError("patterns must be (shots, N) with one id per shot")
        object.__setattr__(self, "shot_ids", ids)
        object.__setattr__(self, "patterns", pats)

    @property
    def n_bins(self) -> int:
        return self.patterns.shape[1]

    def __len__(self):
        return len(self.shot_ids)

    def records(self) -> Iterator[ShotRecord]:
        for sid, row in zip(self.shot_ids.tolist(), self.patterns.tolist()):
            yield ShotRecord(sid, tuple(row))

    @classmethod
    def from_records(cls, records, n_bins: int | None = None) -> "ShotBatch":
        records = list(records)
        if not records and n_bins is None:
            raise ValidationError("n_bins is required for an empty batch")
        width = n_bins if n_bins is not None else len(records[0].pattern)
        ids = np.array([r.shot_id for r in records], dtype=np.int64)
        pats = np.zeros((len(records), width), dtype=bool)
        for i, r in enumerate(records):
            if len(r.pattern) != width:
                raise ValidationError(f"shot {r.shot_id}: pattern length {len(r.pattern)} != {width}")
            pats[i] = r.pattern
        return cls(ids, pats)


def _uniforms(seed: int, first_shot: int, shots: int, per_shot: int) -> np.ndarray:
    """Uniforms for shots ``first_shot .. first_shot+shots-1``, shape (shots, per_shot).

    Philox is counter-based: shot i always owns counter blocks
    ``i*b + 1 .. i*b + b`` under key ``seed`` (b = ceil(per_shot / 4)), so
    any chunking of the shot range reproduces the same numbers.
    """
    blocks = -(-per_shot // 4)
    bitgen = np.random.Philox(key=seed, counter=first_shot * blocks)
    u = np.random.Generator(bitgen).random(shots * blocks * 4)
    return u.reshape(shots, blocks * 4)[:, :per_shot]


def _coherent_chunk(p_click: float, seed: int, first: int, count: int, n_bins: int):
    return _uniforms(seed, first, count, n_bins) < p_click


def _general_chunk(cdf, eta, p_dark, seed, first, count, n_bins):
    n_max = len(cdf) - 1
    u = _uniforms(seed, first, count, 1 + n_max + n_bins)
    photons = np.minimum(np.searchsorted(cdf, u[:, 0], side="right"), n_max)
    per_photon = u[:, 1 : 1 + n_max]
    exists = np.arange(n_max)[None, :] < photons[:, None]
    detected = exists & (per_photon < eta)
    clicks = u[:, 1 + n_max :] < p_dark
    rows, cols = np.nonzero(detected)
    if rows.size:
        # conditioned on detection, u / eta is uniform on [0, 1): reuse it for the bin.
        bins = np.minimum((per_photon[rows, cols] / eta * n_bins).astype(np.int64), n_bins - 1)
        clicks[rows, bins] = True
    return clicks


def sample_shots(
    p: ResponseParams,
    nbar: float,
    shots: int,
    seed: int,
    mode: Literal["coherent", "general"] = "coherent",
    photons: PhotonDistribution | None = None,
    first_shot: int = 0,
    workers: int = 1,
) -> ShotBatch:
    """Simulate ``shots`` triggers of an N-bin click detector.

    ``coherent`` mode: each bin clicks independently with probability
    1 - exp(-Gamma(nbar)), which is exact for coherent input.

    ``general`` mode: draw a photon number from ``photons`` (default
    truncated Poisson(nbar)), keep each photon with probability eta, send it
    to a uniformly random bin, and add per-bin dark clicks with probability
    1 - exp(-nu). The quadratic response term has no per-photon analogue
    and must be zero here.

    Output is a pure function of (params, nbar, seed, shot id).
    """
    if shots < 1:
        raise ValidationError("shots must be >= 1")
    if seed < 0:
        raise ValidationError("seed must be >= 0")
    n = p.n_bins
    if mode == "coherent":
        p_click = -math.expm1(-response_gamma(p, nbar))
        work = lambda first, count: _coherent_chunk(p_click, seed, first, count, n)  # noqa: E731
    elif mode == "general":
        if p.gamma != 0:
            raise ValidationError("general-state sampling does not model the gamma term")
        if photons is None:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", TailMassWarning)
                photons = poisson_distribution(nbar, default_n_max(nbar, n))
        if photons.signed:
            raise ValidationError("cannot sample from a signed distribution")
        cdf = np.cumsum(photons.values)
        p_dark = -math.expm1(-p.nu)
        work = lambda first, count: _general_chunk(cdf, p.eta, p_dark, seed, first, count, n)  # noqa: E731
    else:
        raise ValidationError(f"unknown sampling mode {mode!r}")

    starts = list(range(first_shot, first_shot + shots, SHOT_CHUNK))
    sizes = [min(SHOT_CHUNK, first_shot + shots - s) for s in starts]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, starts, sizes))
    else:
        parts = [work(s, c) for s, c in zip(starts, sizes)]
    ids = np.arange(first_shot, first_shot + shots, dtype=np.int64)
    return ShotBatch(ids, np.concatenate(parts, axis=0))


def photon_flux(
    power_w: float, base_loss_db: float, atten_db: float, wavelength_m: float, rep_rate_hz: float
) -> float:
    """Mean photons per pulse: 10^(-(L0+L)/10) P0 lambda / (r h c)."""
    for name, value in (("power", power_w), ("wavelength", wavelength_m), ("rep_rate", rep_rate_hz)):
        if not value > 0:
            raise DomainError(f"{name} must be positive, got {value}")
    power_at_detector = 10.0 ** (-(base_loss_db + atten_db) / 10.0) * power_w
    return power_at_detector * wavelength_m / (rep_rate_hz * PLANCK_CONSTANT * SPEED_OF_LIGHT)


def dark_count_note(p: ResponseParams) -> str | None:
    """Warn (and return a note) when nu > 0: the conversion matrix has no dark-count term."""
    if p.nu > 0:
        note = (
            f"dark-count rate nu={p.nu:g} is part of the forward model but not of the "
            "photon-to-click matrix; reconstructed statistics include dark clicks"
        )
        warnings.warn(note, ModelMismatchWarning, stacklevel=2)
        return note
    return None
