"""Command-line interface.

Subcommands: simulate, tomography, qparams, invert, deconvolve,
paper-pipeline. Settings come from defaults, then an optional JSON config
file (``--config``, same keys as the long flags), then explicit flags.

Exit codes: 0 success, 2 validation, 3 saturation, 4 I/O or file format.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from . import __version__
from .dataio import aggregate, format_float, read_report, read_shots, write_shots
from .errors import ClickReconError, SaturationError, ValidationError
from .pipeline import (
    DetectorConfig,
    RunConfig,
    analytic_q_sweep,
    deconvolve,
    invert,
    default_detectors,
    paper_pipeline,
    shot_file_name,
    simulate_point,
    tomography,
    write_outputs,
)
from .statistics import q_from_covariance

log = logging.getLogger("clickrecon")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SATURATION = 3
EXIT_IO = 4

# flag dest -> (config-file key)
_FLAG_KEYS = {
    "n_bins": "n-bins",
    "eta": "eta",
    "nu": "nu",
    "gamma": "gamma",
    "nbar": "nbar",
    "shots": "shots",
    "seed": "seed",
    "n_max": "n-max",
    "fit_order": "fit-order",
    "bootstrap": "bootstrap",
    "clamp": "clamp",
    "eta_to": "eta-to",
    "out": "out",
    "format": "format",
    "workers": "workers",
    "mode": "mode",
    "fit_report": "fit-report",
}


def _common(p: argparse.ArgumentParser, detector=True):
    S = argparse.SUPPRESS
    if detector:
        p.add_argument("--n-bins", type=int, action="append", default=S,
                       help="number of detection bins N (repeatable for paper-pipeline)")
        p.add_argument("--eta", type=float, default=S, help="quantum efficiency")
        p.add_argument("--nu", type=float, default=S, help="dark-count rate per bin")
        p.add_argument("--gamma", type=float, default=S, help="quadratic response coefficient")
        p.add_argument("--nbar", type=float, action="append", default=S,
                       help="mean photon number (repeatable)")
    p.add_argument("--shots", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--n-max", type=int, default=S, help="photon-number truncation")
    p.add_argument("--fit-order", choices=["linear", "quadratic"], default=S)
    p.add_argument("--bootstrap", type=int, default=S, help="bootstrap resamples")
    p.add_argument("--clamp", action="store_true", default=S,
                   help="clip negative deconvolved probabilities (plotting only)")
    p.add_argument("--eta-to", type=float, action="append", default=S,
                   help="target efficiency for deconvolution (repeatable: staircase)")
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--format", choices=["json", "csv"], default=S,
                   help="format of the summary printed to stdout")
    p.add_argument("--workers", type=int, default=S, help="threads for sampling and bootstrap")
    p.add_argument("--mode", choices=["coherent", "general"], default=S,
                   help="shot sampler: per-bin Bernoulli or photon-by-photon")
    p.add_argument("--config", type=Path, help="JSON config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clickrecon",
        description="Photon-number statistics from multiplexed click detectors.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write one shot file per nbar")
    _common(p)

    p = sub.add_parser("tomography", help="fit the response function")
    p.add_argument("shot_files", nargs="+", type=Path)
    _common(p)

    p = sub.add_parser("qparams", help="Q_M and Q_B of data or analytic sweeps")
    p.add_argument("inputs", nargs="*", type=Path, help="shot files or a report file")
    p.add_argument("--analytic", action="store_true", help="theory sweep over --nbar")
    _common(p)

    p = sub.add_parser("invert", help="pseudo-invert click statistics")
    p.add_argument("shot_files", nargs="+", type=Path)
    p.add_argument("--fit-report", type=Path, default=argparse.SUPPRESS,
                   help="tomography report whose fitted eta tags the output")
    _common(p)

    p = sub.add_parser("deconvolve", help="remove loss from an invert report")
    p.add_argument("report", type=Path)
    p.add_argument("--name", action="append", help="distribution name(s) to deconvolve")
    _common(p, detector=False)

    p = sub.add_parser("paper-pipeline", help="simulate, calibrate, invert and deconvolve end to end")
    p.add_argument("--no-shot-files", action="store_true", help="keep shots in memory only")
    _common(p)
    return parser


def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON config: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    by_key = {v: k for k, v in _FLAG_KEYS.items()}
    out = {}
    for key, value in raw.items():
        dest = by_key.get(key, key.replace("-", "_"))
        if dest not in _FLAG_KEYS:
            raise ValidationError(f"{path}: unknown config key {key!r}")
        out[dest] = value
    return out


def _as_list(v):
    if v is None:
        return None
    return list(v) if isinstance(v, (list, tuple)) else [v]


def resolve(args: argparse.Namespace, single_detector: bool = True) -> tuple[RunConfig, dict]:
    """Merge defaults < config file < flags into a validated RunConfig."""
    merged = _load_config(getattr(args, "config", None))
    merged.update({k: v for k, v in vars(args).items() if k in _FLAG_KEYS})

    n_bins = _as_list(merged.get("n_bins"))
    detectors = default_detectors()
    if n_bins:
        known = {d.n_bins: d for d in detectors}
        detectors = [
            known.get(n, DetectorConfig(n, detectors[0].eta, nbar=list(detectors[0].nbar)))
            for n in n_bins
        ]
    elif single_detector:
        detectors = detectors[:1]
    for d in detectors:
        if "eta" in merged:
            d.eta = float(merged["eta"])
        if "nu" in merged:
            d.nu = float(merged["nu"])
        if "gamma" in merged:
            d.gamma = float(merged["gamma"])
        if "nbar" in merged:
            d.nbar = [float(x) for x in _as_list(merged["nbar"])]

    cfg = RunConfig(detectors=detectors)
    simple = {
        "shots": int, "seed": int, "n_max": int, "bootstrap": int, "fit_order": str,
        "clamp": bool, "out": str, "workers": int, "mode": str,
    }
    for key, conv in simple.items():
        if key in merged:
            setattr(cfg, key, conv(merged[key]))
    if "eta_to" in merged:
        cfg.eta_to = [float(x) for x in _as_list(merged["eta_to"])]
    if "format" in merged:
        cfg.fmt = merged["format"]
    args.resolved = cfg
    return cfg.validate(), merged


def _emit(summary: dict, fmt: str) -> None:
    if fmt == "csv":
        for key, value in _flatten(summary):
            print(f"{key},{format_float(value) if isinstance(value, float) else value}")
    else:
        print(json.dumps(summary, indent=2, sort_keys=True, default=str))


def _flatten(d, prefix=""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        elif isinstance(v, (list, tuple)):
            yield key, ";".join(str(x) for x in v)
        else:
            yield key, v


def _load_points(paths):
    """Read shot files; returns (n_bins, nbars, aggregates)."""
    files = [read_shots(p) for p in paths]
    n_bins = {f.n_bins for f in files}
    if len(n_bins) != 1:
        raise ValidationError(f"shot files mix different N: {sorted(n_bins)}")
    return n_bins.pop(), files, [aggregate(f) for f in files]


def _nbars(files, cfg: RunConfig, require=True):
    given = cfg.detectors[0].nbar if cfg.detectors else []
    from_header = [f.nbar for f in files]
    if all(v is not None for v in from_header):
        return from_header
    if len(given) == len(files):
        return list(given)
    if require:
        raise ValidationError("nbar missing from shot headers; pass one --nbar per file")
    return [None] * len(files)


def cmd_simulate(args) -> dict:
    cfg, _ = resolve(args)
    det = cfg.detectors[0]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, nb in enumerate(det.nbar):
        sf = simulate_point(cfg, det, i)
        path = out / shot_file_name(det.n_bins, i, nb)
        write_shots(path, sf)
        written.append(str(path))
    return {"files": written, "shots": cfg.shots}


def cmd_tomography(args) -> dict:
    cfg, _ = resolve(args)
    n_bins, files, aggs = _load_points(args.shot_files)
    nbars = _nbars(files, cfg)
    result = tomography(cfg, n_bins, nbars, aggs)
    write_outputs(result, cfg.out)
    fit = result.report.response_fits[cfg.fit_order]
    return {
        "n_bins": n_bins,
        "order": cfg.fit_order,
        "nu": fit.nu,
        "eta": fit.eta,
        "gamma": fit.gamma,
        "sigma": [float(s) for s in fit.sigma],
        "r_squared": fit.r_squared,
        "gamma_significant": result.report.tables["gamma_significant"],
    }


def cmd_qparams(args) -> dict:
    cfg, _ = resolve(args)
    det = cfg.detectors[0]
    if args.analytic:
        result = analytic_q_sweep(det, det.nbar, cfg.n_max)
        write_outputs(result, cfg.out)
        return {"points": len(det.nbar), "n_bins": det.n_bins}
    if not args.inputs:
        raise ValidationError("give shot files, a report file, or --analytic")
    if len(args.inputs) == 1 and args.inputs[0].suffix == ".json":
        report = read_report(args.inputs[0])
        summary = {}
        for name, p in report.photon_distributions.items():
            n = report.tables.get("n_bins", len(p.values) - 1)
            summary[name] = {
                kind: {"q": q.q, "sigma": q.sigma}
                for kind, q in (
                    ("q_mandel", q_from_covariance(p, "mandel")),
                    ("q_binomial", q_from_covariance(p, "binomial", n)),
                )
            }
        return summary
    n_bins, files, aggs = _load_points(args.inputs)
    result = invert(cfg, n_bins, _nbars(files, cfg), aggs, eta=det.eta, tag="_q")
    write_outputs(result, cfg.out)
    return {
        k: {"q": v.q, "sigma": v.sigma} for k, v in result.report.q_values.items()
    }


def cmd_invert(args) -> dict:
    cfg, merged = resolve(args)
    n_bins, files, aggs = _load_points(args.shot_files)
    eta = cfg.detectors[0].eta
    if "fit_report" in merged:
        fits = read_report(Path(merged["fit_report"])).response_fits
        if cfg.fit_order not in fits:
            raise ValidationError(f"fit report has no {cfg.fit_order} fit")
        eta = fits[cfg.fit_order].eta
    result = invert(cfg, n_bins, _nbars(files, cfg, require=False), aggs, eta=eta)
    write_outputs(result, cfg.out)
    return {
        k: {"q": v.q, "sigma": v.sigma} for k, v in result.report.q_values.items()
    }


def cmd_deconvolve(args) -> dict:
    cfg, _ = resolve(args)
    inverted = read_report(args.report)
    result = deconvolve(cfg, inverted, args.name)
    write_outputs(result, cfg.out)
    summary = {k: {"q": v.q, "sigma": v.sigma} for k, v in result.report.q_values.items()}
    summary["total_variation_vs_ideal"] = result.report.tables.get("total_variation_vs_ideal", {})
    return summary


def cmd_paper_pipeline(args) -> dict:
    cfg, _ = resolve(args, single_detector=False)
    summary = paper_pipeline(cfg, write_shot_files=not args.no_shot_files)
    return summary["tables"]


COMMANDS = {
    "simulate": cmd_simulate,
    "tomography": cmd_tomography,
    "qparams": cmd_qparams,
    "invert": cmd_invert,
    "deconvolve": cmd_deconvolve,
    "paper-pipeline": cmd_paper_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            summary = COMMANDS[args.command](args)
        resolved = getattr(args, "resolved", None)
        _emit(summary, resolved.fmt if resolved is not None else "json")
        return EXIT_OK
    except SaturationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SATURATION
    except ClickReconError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
