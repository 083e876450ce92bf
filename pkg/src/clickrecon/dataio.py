"""File formats: shot records, aggregated counts and JSON analysis reports.

Shot files are plain text::

    # version=1
    # N=4
    # seed=7
    # nbar=0.84
    shot_id,pattern
    0,0110
    1,0000

The pattern is a fixed-width 0/1 string with bin 1 leftmost. Header lines
may also pack several ``key=value`` pairs separated by commas.

Reports are a single JSON document validated against
``report_schema.json``. Floats are written in their shortest exact
decimal form so every value round-trips; NaN and infinities use the ``NaN`` /
``Infinity`` tokens understood by Python's json module.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .errors import FileFormatError, ValidationError
from .forward_model import ShotBatch
from .reconstruction import NegativityReport, ReconstructionReport
from .statistics import ClickDistribution, PhotonDistribution, QEstimate
from .tomography import BinStatistics, ResponseFit

SHOT_FORMAT_VERSION = 1
REPORT_SCHEMA = "clickrecon.report"
REPORT_SCHEMA_VERSION = 1
SHOT_COLUMNS = "shot_id,pattern"

__all__ = [
    "ShotFile",
    "Aggregate",
    "ReportFile",
    "read_shots",
    "write_shots",
    "aggregate",
    "merge_aggregates",
    "write_report",
    "read_report",
    "write_csv",
    "format_float",
]


# -- shot files -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ShotFile:
    """Header metadata plus the recorded shots."""

    n_bins: int
    shots: ShotBatch
    seed: int | None = None
    nbar: float | None = None
    version: int = SHOT_FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.shots.n_bins != self.n_bins:
            raise ValidationError(
                f"patterns have {self.shots.n_bins} bins but header says N={self.n_bins}"
            )

    def __len__(self):
        return len(self.shots)

    def __eq__(self, other):
        if not isinstance(other, ShotFile):
            return NotImplemented
        return (
            self.n_bins == other.n_bins
            and self.seed == other.seed
            and self.nbar == other.nbar
            and self.version == other.version
            and self.extra == other.extra
            and np.array_equal(self.shots.shot_ids, other.shots.shot_ids)
            and np.array_equal(self.shots.patterns, other.shots.patterns)
        )


def _header_lines(sf: ShotFile) -> list[str]:
    lines = [f"# version={sf.version}", f"# N={sf.n_bins}"]
    if sf.seed is not None:
        lines.append(f"# seed={sf.seed}")
    if sf.nbar is not None:
        lines.append(f"# nbar={format_float(sf.nbar)}")
    for key, value in sf.extra.items():
        lines.append(f"# {key}={value}")
    return lines


def write_shots(path, sf: ShotFile) -> None:
    ids = sf.shots.shot_ids
    if len(ids) > 1 and np.any(np.diff(ids) <= 0):
        raise ValidationError("shot ids must be strictly increasing")
    chars = np.where(sf.shots.patterns, ord("1"), ord("0")).astype(np.uint8)
    patterns = np.ascontiguousarray(chars).view(f"S{sf.n_bins}").ravel()
    body = [f"{i},{p.decode('ascii')}" for i, p in zip(ids.tolist(), patterns)]
    text = "\n".join(_header_lines(sf) + [SHOT_COLUMNS] + body) + "\n"
    Path(path).write_bytes(text.encode("ascii"))


_KNOWN_HEADER = {"version", "N", "seed", "nbar"}


def read_shots(path) -> ShotFile:
    path = Path(path)
    try:
        raw = path.read_bytes().decode("ascii")
    except UnicodeDecodeError as exc:
        raise FileFormatError("shot file must be ASCII", path) from exc
    lines = raw.splitlines()
    header: dict[str, str] = {}
    pos = 0
    while pos < len(lines) and lines[pos].startswith("#"):
        for item in lines[pos][1:].split(","):
            item = item.strip()
            if not item:
                continue
            key, sep, value = item.partition("=")
            if not sep:
                raise FileFormatError(f"header entry {item!r} is not key=value", path, pos + 1)
            header[key.strip()] = value.strip()
        pos += 1
    if "version" not in header or "N" not in header:
        raise FileFormatError("header must define version and N", path)
    if header["version"] != str(SHOT_FORMAT_VERSION):
        raise FileFormatError(f"unsupported shot format version {header['version']!r}", path)
    try:
        n_bins = int(header["N"])
        seed = int(header["seed"]) if "seed" in header else None
        nbar = float(header["nbar"]) if "nbar" in header else None
    except ValueError as exc:
        raise FileFormatError(f"bad header value: {exc}", path) from exc
    if n_bins < 1:
        raise FileFormatError("N must be >= 1", path)
    if pos < len(lines) and lines[pos].strip() == SHOT_COLUMNS:
        pos += 1

    ids = []
    chunks = []
    previous = None
    for lineno in range(pos, len(lines)):
        line = lines[lineno]
        if not line.strip():
            continue
        sid_text, sep, pattern = line.partition(",")
        if not sep or not sid_text.strip().isdigit():
            raise FileFormatError(f"expected 'shot_id,pattern', got {line!r}", path, lineno + 1)
        pattern = pattern.strip()
        if len(pattern) != n_bins or pattern.strip("01"):
            raise FileFormatError(
                f"pattern {pattern!r} must be {n_bins} characters from {{0,1}}", path, lineno + 1
            )
        sid = int(sid_text)
        if previous is not None and sid <= previous:
            kind = "duplicate" if sid == previous else "decreasing"
            raise FileFormatError(f"{kind} shot_id {sid}", path, lineno + 1)
        previous = sid
        ids.append(sid)
        chunks.append(pattern)
    flat = np.frombuffer("".join(chunks).encode("ascii"), dtype=np.uint8)
    patterns = (flat == ord("1")).reshape(len(ids), n_bins)
    extra = {k: v for k, v in header.items() if k not in _KNOWN_HEADER}
    return ShotFile(n_bins, ShotBatch(np.array(ids, dtype=np.int64), patterns), seed, nbar, extra=extra)


# -- aggregation ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Aggregate:
    """Exact integer counters from a set of shots."""

    click_counts: np.ndarray
    per_bin: BinStatistics

    @property
    def shots(self) -> int:
        return self.per_bin.shots

    def clicks(self) -> ClickDistribution:
        return ClickDistribution.from_counts(self.click_counts)

    def __eq__(self, other):
        if not isinstance(other, Aggregate):
            return NotImplemented
        return (
            np.array_equal(self.click_counts, other.click_counts)
            and np.array_equal(self.per_bin.joint, other.per_bin.joint)
            and self.shots == other.shots
        )


def aggregate(shots: ShotFile | ShotBatch) -> Aggregate:
    """Total-click histogram, per-bin click totals and pairwise joint click counts."""
    batch = shots.shots if isinstance(shots, ShotFile) else shots
    if len(batch) < 1:
        raise ValidationError("aggregation needs at least one shot")
    pats = batch.patterns
    n = pats.shape[1]
    totals = pats.sum(axis=1)
    counts = np.bincount(totals, minlength=n + 1).astype(np.int64)
    as_int = pats.astype(np.int64)
    joint = as_int.T @ as_int
    return Aggregate(counts, BinStatistics(np.diag(joint).copy(), joint, len(batch)))


def merge_aggregates(parts) -> Aggregate:
    """Sum aggregates of disjoint shot sets (order-independent)."""
    parts = list(parts)
    if not parts:
        raise ValidationError("nothing to merge")
    counts = sum(p.click_counts for p in parts)
    joint = sum(p.per_bin.joint for p in parts)
    shots = sum(p.shots for p in parts)
    return Aggregate(counts, BinStatistics(np.diag(joint).copy(), joint, shots))


# -- numbers and CSV ----------------------------------------------------------


def format_float(x: float) -> str:
    """Shortest text that reads back as the same double; locale-independent."""
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return repr(x)


def write_csv(path, columns, rows) -> None:
    """Plot-ready CSV; floats through ``format_float``."""
    out = [",".join(columns)]
    for row in rows:
        cells = []
        for v in row:
            if isinstance(v, (bool, np.bool_)):
                cells.append(str(int(v)))
            elif isinstance(v, (int, np.integer)):
                cells.append(str(int(v)))
            elif isinstance(v, (float, np.floating)):
                cells.append(format_float(v))
            else:
                cells.append(str(v))
        out.append(",".join(cells))
    Path(path).write_bytes(("\n".join(out) + "\n").encode("ascii"))


# -- reports ------------------------------------------------------------------


def _dumps(obj, level=0) -> str:
    pad = "  " * (level + 1)
    end = "  " * level
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [_dumps(v, level + 1) for v in obj]
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(items) + "]"
        return "[\n" + ",\n".join(pad + i for i in items) + "\n" + end + "]"
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_dumps(v, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _matrix(a) -> list:
    return [[float(x) for x in row] for row in np.asarray(a)]


def encode_click(c: ClickDistribution) -> dict:
    out = {"n_bins": c.n_bins, "shot_count": c.shot_count, "values": [float(v) for v in c.values]}
    if c.counts is not None:
        out["counts"] = [int(v) for v in c.counts]
    return out


def decode_click(d: dict) -> ClickDistribution:
    counts = d.get("counts")
    return ClickDistribution(
        np.array(d["values"], dtype=float),
        n_bins=d["n_bins"],
        shot_count=d["shot_count"],
        counts=None if counts is None else np.array(counts, dtype=np.int64),
    )


def encode_photon(p: PhotonDistribution) -> dict:
    out = {
        "values": [float(v) for v in p.values],
        "eta_tag": float(p.eta_tag),
        "pseudo": p.pseudo,
        "deconvolved": p.deconvolved,
        "tail_mass": float(p.tail_mass),
    }
    if p.covariance is not None:
        out["covariance"] = _matrix(p.covariance)
        out["sigma"] = [float(v) for v in p.sigma]
    return out


def decode_photon(d: dict) -> PhotonDistribution:
    cov = d.get("covariance")
    return PhotonDistribution(
        np.array(d["values"], dtype=float),
        eta_tag=float(d["eta_tag"]),
        pseudo=d["pseudo"],
        deconvolved=d["deconvolved"],
        tail_mass=float(d["tail_mass"]),
        covariance=None if cov is None else np.array(cov, dtype=float),
    )


def encode_fit(f: ResponseFit) -> dict:
    return {
        "nu": f.nu,
        "eta": f.eta,
        "gamma": f.gamma,
        "sigma": [float(v) for v in f.sigma],
        "std_errors": [float(v) for v in f.std_errors],
        "significance": [float(v) for v in f.significance],
        "covariance": _matrix(f.covariance),
        "r_squared": f.r_squared,
        "order": f.order,
        "n_bins": f.n_bins,
        "weighted": f.weighted,
        "chi2": f.chi2,
        "dof": f.dof,
        "flags": list(f.flags),
    }


def decode_fit(d: dict) -> ResponseFit:
    return ResponseFit(
        nu=float(d["nu"]),
        eta=float(d["eta"]),
        gamma=float(d["gamma"]),
        covariance=np.array(d["covariance"], dtype=float),
        r_squared=float(d["r_squared"]),
        order=d["order"],
        n_bins=d["n_bins"],
        weighted=d["weighted"],
        chi2=float(d["chi2"]),
        dof=d["dof"],
        flags=tuple(d.get("flags", ())),
    )


def encode_q(q: QEstimate) -> dict:
    return {"kind": q.kind, "q": float(q.q), "sigma": float(q.sigma), "flag": q.flag}


def decode_q(d: dict) -> QEstimate:
    return QEstimate(float(d["q"]), float(d["sigma"]), d["kind"], d.get("flag", ""))


def encode_negativity(n: NegativityReport) -> dict:
    return {
        "neg_mass": float(n.neg_mass),
        "worst_index": n.worst_index,
        "significance": None if n.significance is None else float(n.significance),
    }


def decode_negativity(d: dict) -> NegativityReport:
    sig = d.get("significance")
    return NegativityReport(float(d["neg_mass"]), d.get("worst_index"), None if sig is None else float(sig))


@dataclass
class ReportFile:
    """One analysis report. Every section is a name -> object mapping.

    ``tables`` holds plain JSON data (lists of rows, scalars) for anything
    that has no dedicated type, e.g. per-bin diagnostics.
    """

    kind: str
    config: dict = field(default_factory=dict)
    click_distributions: dict[str, ClickDistribution] = field(default_factory=dict)
    photon_distributions: dict[str, PhotonDistribution] = field(default_factory=dict)
    response_fits: dict[str, ResponseFit] = field(default_factory=dict)
    q_values: dict[str, QEstimate] = field(default_factory=dict)
    negativity: dict[str, NegativityReport] = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "schema_version": REPORT_SCHEMA_VERSION,
            "kind": self.kind,
            "config": self.config,
            "click_distributions": {k: encode_click(v) for k, v in self.click_distributions.items()},
            "photon_distributions": {
                k: encode_photon(v) for k, v in self.photon_distributions.items()
            },
            "response_fits": {k: encode_fit(v) for k, v in self.response_fits.items()},
            "q_values": {k: encode_q(v) for k, v in self.q_values.items()},
            "negativity": {k: encode_negativity(v) for k, v in self.negativity.items()},
            "tables": self.tables,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReportFile":
        return cls(
            kind=d["kind"],
            config=d.get("config", {}),
            click_distributions={k: decode_click(v) for k, v in d.get("click_distributions", {}).items()},
            photon_distributions={
                k: decode_photon(v) for k, v in d.get("photon_distributions", {}).items()
            },
            response_fits={k: decode_fit(v) for k, v in d.get("response_fits", {}).items()},
            q_values={k: decode_q(v) for k, v in d.get("q_values", {}).items()},
            negativity={k: decode_negativity(v) for k, v in d.get("negativity", {}).items()},
            tables=d.get("tables", {}),
            warnings=list(d.get("warnings", [])),
        )

    def add_reconstruction(self, name: str, r: ReconstructionReport) -> None:
        self.click_distributions[name] = r.input
        self.photon_distributions[name] = r.output
        self.negativity[name] = r.negativity
        for attr in ("q_mandel", "q_binomial", "click_q_mandel", "click_q_binomial"):
            q = getattr(r, attr)
            if q is not None:
                self.q_values[f"{name}.{attr}"] = q
        self.warnings.extend(r.notes)


def report_schema() -> dict:
    text = resources.files("clickrecon").joinpath("report_schema.json").read_text("utf-8")
    return json.loads(text)


def _validate(doc, path=None) -> None:
    if not isinstance(doc, dict):
        raise FileFormatError("report must be a JSON object", path)
    if doc.get("schema") != REPORT_SCHEMA:
        raise FileFormatError(f"not a {REPORT_SCHEMA} document", path)
    if doc.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise FileFormatError(
            f"unsupported report schema version {doc.get('schema_version')!r}", path
        )
    try:
        jsonschema.validate(doc, report_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path)
        raise FileFormatError(f"schema violation at {where or '<root>'}: {exc.message}", path) from exc


def dumps_report(report: ReportFile) -> str:
    doc = report.to_dict()
    _validate(doc)
    return _dumps(doc) + "\n"


def write_report(path, report: ReportFile) -> None:
    Path(path).write_bytes(dumps_report(report).encode("utf-8"))


def read_report(path) -> ReportFile:
    path = Path(path)
    try:
        doc = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"invalid JSON: {exc}", path, exc.lineno) from exc
    _validate(doc, path)
    return ReportFile.from_dict(doc)
