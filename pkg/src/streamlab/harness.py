"""Scenario runner, report files and expectation checks.

A scenario is a JSON object::

    {
      "name": "grid",
      "protocols": ["webrtc", "roq", "moq"],
      "profiles": ["1080p", "720p", "480p"],
      "network": ["wifi-like", "5g-like"],
      "duration_s": 120,
      "seed": 1,
      "repetitions": 5,
      "overrides": {"jitter_buffer_ms": 50}
    }

``network`` may be a preset name, an inline profile object or a list of
either.  Every (network, profile, protocol) cell runs ``repetitions``
sessions; repetition ``r`` uses the same netem seed for every protocol and
profile, so all cells see the same randomness.
"""

from __future__ import annotations

import csv
import io
import json
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fnmatch import fnmatchcase
from importlib import resources
from pathlib import Path as FsPath

from streamlab.core import ENCODING_PRESETS, ConfigError, ProtocolKind, RunConfig, derive_seed
from streamlab.metrics import REPORT_COLUMNS, ReportError, SessionReport, build_report
from streamlab.netem import NetProfile, resolve_network
from streamlab.protocols import run_session

SCENARIO_KEYS = {"name", "protocols", "profiles", "network", "duration_s", "seed", "repetitions",
                 "overrides"}
OVERRIDE_KEYS = {
    "signaling_rtts", "jitter_buffer_ms", "relay_placement", "roq_mode", "fmp4_overhead",
    "pacing_frames", "encoder_start_ms", "subscribe_filter", "moq_warmup_ms", "mtu_bytes",
    "encoder_efficiency", "drain_s",
}
PROTOCOL_ORDER = [ProtocolKind.WEBRTC_LIKE, ProtocolKind.ROQ, ProtocolKind.MOQ]


@dataclass
class Scenario:
    name: str
    protocols: list[ProtocolKind]
    profiles: list[str]
    networks: list[NetProfile]
    duration_s: float = 120.0
    seed: int = 1
    repetitions: int = 5
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.name or any(c in self.name for c in "/\\"):
            raise ConfigError(f"bad scenario name {self.name!r}")
        if not self.protocols or not self.profiles or not self.networks:
            raise ConfigError("protocols, profiles and network must be non-empty")
        for p in self.profiles:
            if p not in ENCODING_PRESETS:
                raise ConfigError(f"unknown encoding profile {p!r}")
        labels = [n.label for n in self.networks]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate network labels {labels}")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        unknown = set(self.overrides) - OVERRIDE_KEYS
        if unknown:
            raise ConfigError(f"unknown override keys {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        unknown = set(d) - SCENARIO_KEYS
        if unknown:
            raise ConfigError(f"unknown scenario keys {sorted(unknown)}")
        missing = {"name", "protocols", "profiles", "network"} - set(d)
        if missing:
            raise ConfigError(f"missing scenario keys {sorted(missing)}")
        nets = d["network"] if isinstance(d["network"], list) else [d["network"]]
        return cls(
            name=d["name"],
            protocols=[ProtocolKind.parse(p) for p in d["protocols"]],
            profiles=list(d["profiles"]),
            networks=[resolve_network(n) for n in nets],
            duration_s=float(d.get("duration_s", 120.0)),
            seed=int(d.get("seed", 1)),
            repetitions=int(d.get("repetitions", 5)),
            overrides=dict(d.get("overrides", {})),
        )

    def configs(self, duration_scale: float = 1.0):
        """Yield ``(network, profile, protocol, rep, RunConfig)`` in report order."""
        for net in self.networks:
            for prof in self.profiles:
                for proto in self.protocols:
                    for rep in range(self.repetitions):
                        cfg = RunConfig(
                            protocol=proto,
                            profile=ENCODING_PRESETS[prof],
                            net=net,
                            duration_s=self.duration_s * duration_scale,
                            seed=self.seed,
                            netem_seed=derive_seed(self.seed, "netem", rep),
                            **self.overrides,
                        )
                        yield net.label, prof, proto, rep, cfg


def load_scenario(source) -> Scenario:
    """From a path, a JSON string or an already-parsed dict."""
    if isinstance(source, dict):
        return Scenario.from_dict(source)
    text = str(source)
    if not text.lstrip().startswith("{"):
        text = FsPath(source).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("scenario must be a JSON object")
    return Scenario.from_dict(data)


# ---------------------------------------------------------------- running


@dataclass
class CellResult:
    network: str
    profile: str
    protocol: ProtocolKind
    reports: list[SessionReport] = field(default_factory=list)
    failure: str | None = None
    capture_csv: str | None = None

    @property
    def key(self) -> tuple[str, str, str]:
        return self.network, self.profile, self.protocol.value

    def summary(self) -> SessionReport:
        return average_reports(self.reports)


@dataclass
class ScenarioResult:
    scenario: Scenario
    cells: list[CellResult]

    @property
    def failures(self) -> list[CellResult]:
        return [c for c in self.cells if c.failure]

    @property
    def ok(self) -> bool:
        return not self.failures

    def reports(self) -> list[SessionReport]:
        return [c.summary() for c in self.cells if not c.failure]


def average_reports(reports: list[SessionReport]) -> SessionReport:
    """Means over repetitions; frame counts are summed."""
    if not reports:
        raise ReportError("no reports to average")
    first = reports[0]

    def mean(attr, nd):
        return round(statistics.fmean(getattr(r, attr) for r in reports), nd)

    return SessionReport(
        protocol=first.protocol,
        profile=first.profile,
        network=first.network,
        startup_ms=mean("startup_ms", 1),
        latency_mean_ms=mean("latency_mean_ms", 2),
        latency_p95_ms=mean("latency_p95_ms", 2),
        throughput_kbps=round(statistics.fmean(r.throughput_kbps for r in reports)),
        jitter_ms=mean("jitter_ms", 2),
        byte_loss_pct=mean("byte_loss_pct", 2),
        frames_rendered=sum(r.frames_rendered for r in reports),
        frames_lost=sum(r.frames_lost for r in reports),
        late_frames=sum(r.late_frames for r in reports),
    )


def _run_one(args):
    network, cfg, keep_capture = args
    trace = run_session(cfg)
    try:
        report = build_report(trace, network)
        failure = None
    except ReportError as exc:
        report, failure = None, str(exc)
    capture = trace.capture.to_csv() if keep_capture else None
    return report, failure, capture


def run_scenario(scenario: Scenario, out_dir=None, *, duration_scale: float = 1.0,
                 seed: int | None = None, workers: int = 1) -> ScenarioResult:
    """Run every cell; writes files under ``out_dir/<scenario name>`` when given."""
    if seed is not None:
        scenario = Scenario(**{**scenario.__dict__, "seed": seed})
    if duration_scale <= 0:
        raise ConfigError("duration scale must be positive")
    jobs, cells = [], {}
    for net, prof, proto, rep, cfg in scenario.configs(duration_scale):
        key = (net, prof, proto.value)
        if key not in cells:
            cells[key] = CellResult(net, prof, proto)
        # only the first repetition's capture is written out
        jobs.append((key, (net, cfg, out_dir is not None and rep == 0)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_one, [j for _, j in jobs], chunksize=1))
    else:
        outputs = [_run_one(j) for _, j in jobs]
    for (key, _), (report, failure, capture) in zip(jobs, outputs):
        cell = cells[key]
        if failure and not cell.failure:
            cell.failure = failure
        if report is not None:
            cell.reports.append(report)
        if capture is not None:
            cell.capture_csv = capture
    result = ScenarioResult(scenario, list(cells.values()))
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


# ---------------------------------------------------------------- outputs


def report_csv(reports: list[SessionReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != REPORT_COLUMNS:
            raise ConfigError(f"unexpected report header {reader.fieldnames}")
        rows = []
        for r in reader:
            row = dict(r)
            for k in REPORT_COLUMNS[3:]:
                row[k] = float(row[k])
            rows.append(row)
        return rows


def report_markdown(result: ScenarioResult) -> str:
    lines = [f"# {result.scenario.name}", ""]
    by_net: dict[str, list[CellResult]] = {}
    for c in result.cells:
        by_net.setdefault(c.network, []).append(c)
    for net, cells in by_net.items():
        lines += [f"## {net}", "", "### Startup and latency", ""]
        profiles = list(dict.fromkeys(c.profile for c in cells))
        head = "| Protocol | " + " | ".join(f"{p} startup (ms) | {p} latency (ms)" for p in profiles) + " |"
        lines += [head, "|" + "---|" * (1 + 2 * len(profiles))]
        protos = [p for p in PROTOCOL_ORDER if any(c.protocol == p for c in cells)]
        for proto in protos:
            vals = []
            for prof in profiles:
                cell = next(c for c in cells if c.protocol == proto and c.profile == prof)
                if cell.failure:
                    vals += ["FAILED", "FAILED"]
                else:
                    s = cell.summary()
                    vals += [f"{s.startup_ms:.1f}", f"{s.latency_mean_ms:.2f}"]
            lines.append(f"| {proto.label} | " + " | ".join(vals) + " |")
        lines += ["", "### Wire metrics at the player", "",
                  "| Protocol | Profile | Throughput usage (kbps) | Jitter (ms) | Bytes loss (%) |",
                  "|---|---|---|---|---|"]
        for prof in profiles:
            for proto in protos:
                cell = next(c for c in cells if c.protocol == proto and c.profile == prof)
                if cell.failure:
                    lines.append(f"| {proto.label} | {prof} | FAILED | FAILED | FAILED |")
                    continue
                s = cell.summary()
                lines.append(f"| {proto.label} | {prof} | {s.throughput_kbps} | {s.jitter_ms:.2f} | "
                             f"{s.byte_loss_pct:.2f} |")
        lines.append("")
    return "\n".join(lines)


def write_outputs(result: ScenarioResult, out_dir) -> FsPath:
    root = FsPath(out_dir) / result.scenario.name
    root.mkdir(parents=True, exist_ok=True)
    for c in result.cells:
        d = root / c.network / f"{c.protocol.value}_{c.profile}"
        d.mkdir(parents=True, exist_ok=True)
        if c.capture_csv is not None:
            (d / "capture.csv").write_text(c.capture_csv)
        if c.failure:
            (d / "FAILED").write_text(c.failure + "\n")
        if c.reports:
            (d / "report.csv").write_text(report_csv([c.summary()]))
    (root / "report.csv").write_text(report_csv(result.reports()))
    (root / "report.md").write_text(report_markdown(result))
    return root


# ----------------------------------------------------------- expectations


@dataclass
class Expectation:
    """An ordering (``lt``) or ratio (``ratio_in``) claim over report cells.

    Cells are ``protocol/profile/network`` selectors; ``*`` matches any value
    and the claim is checked once per combination of wildcard values.
    """

    metric: str
    cells: list[str]
    relation: str
    bounds: tuple[float, float] | None = None
    tolerance: float = 0.0
    name: str = ""

    def __post_init__(self):
        if self.metric not in REPORT_COLUMNS[3:]:
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.relation == "lt":
            if len(self.cells) < 2:
                raise ConfigError("lt needs at least two cells")
        elif self.relation == "ratio_in":
            if len(self.cells) != 2 or self.bounds is None or len(self.bounds) != 2:
                raise ConfigError("ratio_in needs two cells and [lo, hi] bounds")
            self.bounds = (float(self.bounds[0]), float(self.bounds[1]))
        else:
            raise ConfigError(f"unknown relation {self.relation!r}")
        for c in self.cells:
            if len(c.split("/")) != 3:
                raise ConfigError(f"cell selector {c!r} is not protocol/profile/network")

    @classmethod
    def from_dict(cls, d: dict) -> "Expectation":
        allowed = {"metric", "cells", "relation", "bounds", "bound", "tolerance", "name"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown expectation keys {sorted(unknown)}")
        bounds = d.get("bounds", d.get("bound"))
        return cls(d["metric"], list(d["cells"]), d["relation"],
                   tuple(bounds) if bounds is not None else None,
                   float(d.get("tolerance", 0.0)), d.get("name", ""))

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.relation == "lt":
            return f"{self.metric}: " + " < ".join(self.cells)
        return f"{self.metric}: {self.cells[0]} / {self.cells[1]} in [{self.bounds[0]}, {self.bounds[1]}]"


@dataclass
class CheckResult:
    expectation: Expectation
    binding: tuple[str, ...]
    status: str  # pass | fail | tie
    observed: list[float]
    detail: str

    def line(self) -> str:
        where = f" [{', '.join(self.binding)}]" if self.binding else ""
        return f"{self.status.upper():4} {self.expectation.label}{where}: {self.detail}"


def _cell_key(row: dict) -> tuple[str, str, str]:
    return row["protocol"], row["profile"], row["network"]


def _norm_protocol(tok: str) -> str:
    if tok == "*":
        return tok
    try:
        return ProtocolKind.parse(tok).label
    except ConfigError:
        return tok


def _expand(exp: Expectation, rows: list[dict]):
    """Bind wildcard positions consistently across all cells of an expectation."""
    selectors = [[_norm_protocol(p) if i == 0 else p for i, p in enumerate(c.split("/"))]
                 for c in exp.cells]
    wild = sorted({i for sel in selectors for i, t in enumerate(sel) if "*" in t})
    keys = [_cell_key(r) for r in rows]
    bindings = []
    for k in keys:
        b = tuple(k[i] for i in wild)
        if b not in bindings and all(fnmatchcase(k[i], selectors[0][i]) for i in range(3)):
            bindings.append(b)
    if not bindings:
        raise ConfigError(f"no report cells match {exp.cells[0]!r}")
    table = {k: r for k, r in zip(keys, rows)}
    for b in bindings:
        bound = dict(zip(wild, b))
        cells = []
        for sel in selectors:
            key = tuple(bound.get(i, sel[i]) if "*" in sel[i] else sel[i] for i in range(3))
            if key not in table:
                raise ConfigError(f"report has no cell {'/'.join(key)}")
            cells.append(table[key])
        yield b, cells


def evaluate(expectations: list[Expectation], rows: list[dict]) -> list[CheckResult]:
    out = []
    for exp in expectations:
        for binding, cells in _expand(exp, rows):
            vals = [float(c[exp.metric]) for c in cells]
            if exp.relation == "lt":
                gaps = [b - a for a, b in zip(vals, vals[1:])]
                if all(g > exp.tolerance for g in gaps):
                    status = "pass"
                elif all(g > -exp.tolerance for g in gaps):
                    status = "tie"
                else:
                    status = "fail"
                detail = " < ".join(f"{v:g}" for v in vals)
            else:
                lo, hi = exp.bounds
                ratio = vals[0] / vals[1] if vals[1] else float("inf")
                status = "pass" if lo <= ratio <= hi else "fail"
                detail = f"{vals[0]:g} / {vals[1]:g} = {ratio:.3f}"
            out.append(CheckResult(exp, binding, status, vals, detail))
    return out


def load_expectations(source) -> list[Expectation]:
    if isinstance(source, list):
        data = source
    else:
        data = json.loads(FsPath(source).read_text())
    if not isinstance(data, list):
        raise ConfigError("expectations must be a JSON list")
    return [Expectation.from_dict(d) for d in data]


def default_expectations() -> list[Expectation]:
    text = resources.files("streamlab").joinpath("data/expectations.json").read_text()
    return load_expectations(json.loads(text))


def compare(report, expectations) -> tuple[bool, list[CheckResult]]:
    """Check a report (path or rows) against expectations (path or list)."""
    rows = read_report_csv(report) if isinstance(report, (str, os.PathLike)) else list(report)
    exps = expectations if expectations and isinstance(expectations[0], Expectation) \
        else load_expectations(expectations)
    results = evaluate(exps, rows)
    return all(r.status == "pass" for r in results), results


def rows_from_reports(reports: list[SessionReport]) -> list[dict]:
    return [r.as_dict() for r in reports]


def default_out_dir() -> str:
    return os.environ.get("STREAMLAB_OUT", "streamlab-out")
