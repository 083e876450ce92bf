"""Analysis steps shared by the CLI commands.

Each function turns in-memory data into a ``ReportFile`` plus plot-ready
CSV tables (column names and rows). Nothing here touches the file system
except ``write_outputs``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .dataio import Aggregate, ReportFile, ShotFile, aggregate, write_csv, write_report, write_shots
from .errors import ValidationError
from .forward_model import (
    ResponseParams,
    coherent_click_distribution,
    dark_count_note,
    default_n_max,
    poisson_distribution,
    sample_shots,
)
from .reconstruction import (
    DEFAULT_WARN_RATIO,
    deconvolve_loss,
    deconvolved_q,
    negativity_report,
    pseudo_invert,
)
from .statistics import DEFAULT_RESAMPLES, q_binomial, q_mandel, total_variation
from .tomography import (
    CalibrationPoint,
    bin_covariances,
    bin_means,
    crosstalk_pairs,
    fit_both_orders,
    uniformity_test,
)

log = logging.getLogger(__name__)

# Attenuation grids: 1 dB steps over 15 dB for N=4 (16 states), 3 dB steps
# for N=8 (6 states), both topping out at nbar = 0.85.
NBAR_MAX = 0.85


def attenuation_grid(points: int, span_db: float = 15.0, top: float = NBAR_MAX) -> list[float]:
    step = span_db / (points - 1)
    return [top * 10.0 ** (-i * step / 10.0) for i in range(points)]


@dataclass
class DetectorConfig:
    n_bins: int
    eta: float
    nu: float = 0.0
    gamma: float = 0.0
    nbar: list[float] = field(default_factory=list)

    def params(self) -> ResponseParams:
        return ResponseParams(nu=self.nu, eta=self.eta, gamma=self.gamma, n_bins=self.n_bins)


def default_detectors() -> list[DetectorConfig]:
    return [
        DetectorConfig(4, 0.608, nbar=attenuation_grid(16)),
        DetectorConfig(8, 0.605, nbar=attenuation_grid(6)),
    ]


@dataclass
class RunConfig:
    """Validated run settings. ``provenance()`` is what goes into reports."""

    detectors: list[DetectorConfig] = field(default_factory=default_detectors)
    shots: int = 1_000_000
    seed: int = 7
    n_max: int | None = None
    bootstrap: int = DEFAULT_RESAMPLES
    fit_order: str = "quadratic"
    clamp: bool = False
    eta_to: list[float] = field(default_factory=lambda: [0.8, 1.0])
    mode: str = "coherent"
    warn_ratio: float = DEFAULT_WARN_RATIO
    out: str = "."
    workers: int = 1
    fmt: str = "json"

    def validate(self) -> "RunConfig":
        if not self.detectors:
            raise ValidationError("no detector configuration selected")
        for d in self.detectors:
            d.params()
            if any(not (x >= 0) for x in d.nbar):
                raise ValidationError("nbar values must be >= 0")
        if self.shots < 1:
            raise ValidationError("shots must be >= 1")
        if self.seed < 0:
            raise ValidationError("seed must be >= 0")
        if self.bootstrap < 2:
            raise ValidationError("bootstrap needs at least 2 resamples")
        if self.fit_order not in ("linear", "quadratic"):
            raise ValidationError(f"unknown fit order {self.fit_order!r}")
        if self.mode not in ("coherent", "general"):
            raise ValidationError(f"unknown sampling mode {self.mode!r}")
        if any(not 0 < e <= 1 for e in self.eta_to):
            raise ValidationError("eta-to values must lie in (0, 1]")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")
        if self.n_max is not None and self.n_max < 0:
            raise ValidationError("n-max must be >= 0")
        return self

    def provenance(self) -> dict:
        """Settings that determine results; output location and parallelism excluded."""
        skip = {"out", "workers", "fmt"}
        out = {}
        for f in fields(self):
            if f.name in skip:
                continue
            value = getattr(self, f.name)
            if f.name == "detectors":
                value = [asdict(d) for d in value]
            out[f.name] = value
        return out


def derive_seed(seed: int, *path: int) -> int:
    """128-bit key for a sub-stream, a pure function of (seed, path)."""
    words = np.random.SeedSequence(seed, spawn_key=tuple(path)).generate_state(2, np.uint64)
    return int(words[0]) | (int(words[1]) << 64)


# -- simulation -------------------------------------------------------------


def simulate_point(cfg: RunConfig, det: DetectorConfig, index: int) -> ShotFile:
    nbar = det.nbar[index]
    key = derive_seed(cfg.seed, det.n_bins, index)
    batch = sample_shots(det.params(), nbar, cfg.shots, key, mode=cfg.mode, workers=cfg.workers)
    return ShotFile(
        det.n_bins, batch, seed=key, nbar=nbar, extra={"base_seed": cfg.seed, "point": index}
    )


def shot_file_name(n_bins: int, index: int, nbar: float) -> str:
    return f"shots_N{n_bins}_{index:02d}_nbar{nbar:.6g}.csv"


# -- tomography --------------------------------------------------------------


@dataclass
class Outputs:
    """A report plus CSV tables keyed by file name."""

    report: ReportFile
    report_name: str
    csv: dict[str, tuple[list[str], list[list]]] = field(default_factory=dict)


def tomography(cfg: RunConfig, n_bins: int, nbars, aggregates: list[Aggregate]) -> Outputs:
    points = [
        CalibrationPoint(nb, agg.clicks(), agg.per_bin) for nb, agg in zip(nbars, aggregates)
    ]
    fits = fit_both_orders(points)
    chosen = fits[cfg.fit_order]
    report = ReportFile(kind="tomography", config=cfg.provenance())
    report.response_fits["linear"] = fits["linear"]
    report.response_fits["quadratic"] = fits["quadratic"]
    report.tables["n_bins"] = n_bins
    report.tables["fit_order"] = cfg.fit_order
    report.tables["gamma_significant"] = fits["gamma_significant"]
    report.tables["eta"] = chosen.eta
    report.tables["eta_sigma"] = float(chosen.sigma[1])

    fit_rows, diag_rows = [], []
    for i, p in enumerate(points):
        kbar, skbar = p.mean_clicks()
        g, sg = p.gamma()
        fit_rows.append([p.nbar, kbar, skbar, g, sg, float(chosen.predict(p.nbar))])
        if p.per_bin is not None:
            means = bin_means(p.per_bin)
            uni = uniformity_test(means)
            cov = bin_covariances(p.per_bin)
            pairs = crosstalk_pairs(cov)
            off = ~np.eye(n_bins, dtype=bool)
            max_z = float(np.max(cov.z[off])) if n_bins > 1 else 0.0
            diag_rows.append([i, p.nbar, uni.chi2, uni.dof, uni.p_value, max_z, len(pairs)])
    report.tables["calibration"] = {
        "columns": ["nbar", "kbar", "kbar_sigma", "gamma", "gamma_sigma", "gamma_fit"],
        "rows": fit_rows,
    }
    report.tables["bin_diagnostics"] = {
        "columns": ["point", "nbar", "chi2", "dof", "p_value", "max_crosstalk_z", "crosstalk_pairs"],
        "rows": diag_rows,
    }
    out = Outputs(report, f"tomography_N{n_bins}.json")
    out.csv[f"response_N{n_bins}.csv"] = (report.tables["calibration"]["columns"], fit_rows)

    top = max(range(len(points)), key=lambda i: points[i].nbar)
    if points[top].per_bin is not None:
        means = bin_means(points[top].per_bin)
        cov = bin_covariances(points[top].per_bin)
        out.csv[f"bin_means_N{n_bins}.csv"] = (
            ["bin", "mean", "sigma"],
            [[j + 1, m, s] for j, (m, s) in enumerate(zip(means.means, means.sigma))],
        )
        out.csv[f"bin_covariance_N{n_bins}.csv"] = (
            ["bin_j", "bin_k", "covariance", "sigma"],
            [
                [j + 1, k + 1, cov.covariance[j, k], cov.sigma[j, k]]
                for j in range(n_bins)
                for k in range(n_bins)
            ],
        )
    return out


# -- inversion and Q parameters --------------------------------------------


def invert(cfg: RunConfig, n_bins: int, nbars, aggregates, eta: float, tag: str = "") -> Outputs:
    """Pseudo-invert every data set; Q parameters before and after."""
    report = ReportFile(kind="invert", config=cfg.provenance())
    report.tables["eta"] = eta
    report.tables["n_bins"] = n_bins
    q_rows = []
    out = Outputs(report, f"invert_N{n_bins}{tag}.json")
    for i, (nb, agg) in enumerate(zip(nbars, aggregates)):
        name = f"N{n_bins}_{i:02d}"
        r = pseudo_invert(
            agg.clicks(),
            eta=eta,
            resamples=cfg.bootstrap,
            seed=derive_seed(cfg.seed, n_bins, i, 1),
            workers=cfg.workers,
        )
        report.add_reconstruction(name, r)
        report.tables.setdefault("nbar", {})[name] = nb
        q_rows.append(
            [
                nb,
                r.click_q_mandel.q, r.click_q_mandel.sigma,
                r.click_q_binomial.q, r.click_q_binomial.sigma,
                r.q_mandel.q, r.q_mandel.sigma,
                r.q_binomial.q, r.q_binomial.sigma,
            ]
        )
        c, p = r.input, r.output
        sig = p.sigma if p.sigma is not None else np.full(len(p.values), math.nan)
        c_sig = np.sqrt(c.values * (1 - c.values) / max(c.shot_count, 1))
        out.csv[f"pseudo_{name}.csv"] = (
            ["index", "click_prob", "click_sigma", "pseudo_photon_prob", "pseudo_photon_sigma"],
            [[k, c.values[k], c_sig[k], p.values[k], sig[k]] for k in range(n_bins + 1)],
        )
    out.csv[f"qparams_N{n_bins}{tag}.csv"] = (
        [
            "nbar",
            "clicks_qm", "clicks_qm_sigma", "clicks_qb", "clicks_qb_sigma",
            "pseudo_qm", "pseudo_qm_sigma", "pseudo_qb", "pseudo_qb_sigma",
        ],
        q_rows,
    )
    return out


def deconvolve(cfg: RunConfig, inverted: ReportFile, names=None) -> Outputs:
    """Loss staircase from the tagged efficiency to each ``cfg.eta_to``."""
    report = ReportFile(kind="deconvolve", config=cfg.provenance())
    out = Outputs(report, "deconvolve.json")
    names = names or [k for k, p in inverted.photon_distributions.items() if p.pseudo]
    nbars = inverted.tables.get("nbar", {})
    stages = sorted(set(cfg.eta_to))
    for name in names:
        start = inverted.photon_distributions[name]
        dists = [start]
        labels = [f"{start.eta_tag:.6g}"]
        for eta_to in stages:
            if eta_to < start.eta_tag:
                raise ValidationError(
                    f"{name}: eta-to {eta_to} is below the data's efficiency {start.eta_tag}"
                )
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                d = deconvolve_loss(
                    start, eta_to, warn_ratio=cfg.warn_ratio, clamp_output=cfg.clamp
                )
            report.warnings.extend(f"{name}: {w.message}" for w in caught)
            dists.append(d)
            labels.append(f"{eta_to:.6g}")
        n_bins = len(start.values) - 1
        ideal = None
        if name in nbars:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                ideal = poisson_distribution(nbars[name], n_bins)
            report.photon_distributions[f"{name}@ideal"] = ideal
        tv = {}
        for label, d in zip(labels, dists):
            key = f"{name}@{label}"
            report.photon_distributions[key] = d
            report.negativity[key] = negativity_report(d)
            for qname, q in deconvolved_q(d, n_bins).items():
                report.q_values[f"{key}.{qname}"] = q
            if ideal is not None:
                tv[label] = total_variation(d, ideal)
        if tv:
            report.tables.setdefault("total_variation_vs_ideal", {})[name] = tv
        columns = ["n"]
        for label in labels:
            columns += [f"p_eta{label}", f"sigma_eta{label}"]
        columns += ["ideal_poisson"]
        rows = []
        for n in range(n_bins + 1):
            row = [n]
            for d in dists:
                s = d.sigma
                row += [d.values[n], s[n] if s is not None else math.nan]
            row.append(ideal.values[n] if ideal is not None else math.nan)
            rows.append(row)
        out.csv[f"deconvolved_{name}.csv"] = (columns, rows)
    return out


def analytic_q_sweep(det: DetectorConfig, nbars, n_max: int | None = None) -> Outputs:
    """Q_M and Q_B of Poisson photon statistics and of coherent click statistics."""
    report = ReportFile(kind="qparams_analytic")
    rows = []
    params = det.params()
    for nb in nbars:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            photons = poisson_distribution(nb, n_max or default_n_max(nb, det.n_bins))
        clicks = coherent_click_distribution(params, nb)
        rows.append(
            [
                nb,
                _safe(q_mandel, photons),
                _safe(q_binomial, photons, det.n_bins),
                _safe(q_mandel, clicks),
                _safe(q_binomial, clicks),
            ]
        )
    columns = ["nbar", "poisson_qm", "poisson_qb", "clicks_qm", "clicks_qb"]
    report.tables["sweep"] = {"columns": columns, "rows": rows}
    report.tables["detector"] = asdict(det)
    out = Outputs(report, f"qparams_analytic_N{det.n_bins}.json")
    out.csv[f"qparams_analytic_N{det.n_bins}.csv"] = (columns, rows)
    return out


def _safe(fn, *args):
    try:
        return fn(*args)
    except Exception:  # noqa: BLE001 - undefined points are plotted as gaps
        return math.nan


def write_outputs(out: Outputs, directory, csv: bool = True) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = [directory / out.report_name]
    write_report(written[0], out.report)
    if csv:
        for name, (columns, rows) in out.csv.items():
            write_csv(directory / name, columns, rows)
            written.append(directory / name)
    return written


# -- end to end ----------------------------------------------------------------


def paper_pipeline(cfg: RunConfig, write_shot_files: bool = True) -> dict:
    """simulate -> tomography -> invert -> deconvolve for every detector configuration.

    Returns a summary dict (also written as ``summary.json``).
    """
    cfg.validate()
    root = Path(cfg.out)
    summary = ReportFile(kind="paper_pipeline", config=cfg.provenance())
    for det in cfg.detectors:
        note = dark_count_note(det.params()) if det.nu > 0 else None
        sub = root / f"N{det.n_bins}"
        sub.mkdir(parents=True, exist_ok=True)
        aggregates = []
        for i, nb in enumerate(det.nbar):
            log.info("N=%d: simulating point %d (nbar=%.4g)", det.n_bins, i, nb)
            sf = simulate_point(cfg, det, i)
            if write_shot_files:
                write_shots(sub / shot_file_name(det.n_bins, i, nb), sf)
            aggregates.append(aggregate(sf))

        tomo = tomography(cfg, det.n_bins, det.nbar, aggregates)
        write_outputs(tomo, sub)
        fit = tomo.report.response_fits[cfg.fit_order]
        summary.response_fits[f"N{det.n_bins}.{cfg.fit_order}"] = fit

        inv = invert(cfg, det.n_bins, det.nbar, aggregates, eta=fit.eta)
        if note:
            inv.report.warnings.append(note)
        write_outputs(inv, sub)

        top = max(range(len(det.nbar)), key=lambda i: det.nbar[i])
        top_name = f"N{det.n_bins}_{top:02d}"
        dec = deconvolve(cfg, inv.report, [top_name])
        write_outputs(dec, sub)

        for key, q in inv.report.q_values.items():
            if key.startswith(top_name):
                summary.q_values[key] = q
        for key, q in dec.report.q_values.items():
            summary.q_values[f"deconvolved.{key}"] = q
        summary.negativity.update({f"deconvolved.{k}": v for k, v in dec.report.negativity.items()})
        summary.tables[f"N{det.n_bins}"] = {
            "eta_true": det.eta,
            "eta_fit": fit.eta,
            "eta_sigma": float(fit.sigma[1]),
            "r_squared": fit.r_squared,
            "gamma_significant": tomo.report.tables["gamma_significant"],
            "total_variation_vs_ideal": dec.report.tables.get("total_variation_vs_ideal", {}),
        }
        summary.warnings.extend(dec.report.warnings)
    write_report(root / "summary.json", summary)
    return summary.to_dict()
