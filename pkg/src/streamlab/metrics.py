"""Per-session measurements: startup, latency, throughput, jitter and byte loss.

Everything here is a pure function of a finished :class:`SessionTrace` or of
capture rows, so identical logs give identical reports.

The steady-state window runs from the first rendered frame to the end of
media generation.  Latency and frame counts cover frames *captured* inside
it, which keeps a relay's backlog flush out of the figures; wire metrics
cover player-ingress packets sent inside it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

from streamlab.core import ProtocolKind
from streamlab.media import LatencySample
from streamlab.netem import WirePacket

MEDIA_KINDS = frozenset({"I", "P"})

REPORT_COLUMNS = [
    "protocol", "profile", "network", "startup_ms", "latency_mean_ms", "latency_p95_ms",
    "throughput_kbps", "jitter_ms", "byte_loss_pct", "frames_rendered", "frames_lost", "late_frames",
]


class ReportError(ValueError):
    pass


@dataclass
class SessionReport:
    protocol: str
    profile: str
    network: str
    startup_ms: float
    latency_mean_ms: float
    latency_p95_ms: float
    throughput_kbps: int
    jitter_ms: float
    byte_loss_pct: float
    frames_rendered: int
    frames_lost: int
    late_frames: int

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and v < 0:
                raise ReportError(f"{f.name} is negative ({v})")
        if self.byte_loss_pct > 100:
            raise ReportError("byte_loss_pct above 100")

    @property
    def frames_generated(self) -> int:
        return self.frames_rendered + self.frames_lost

    def row(self) -> list:
        return [getattr(self, c) for c in REPORT_COLUMNS]

    def as_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------ primitives


def startup_time(trace) -> float:
    """First render minus player start, in ms (1 decimal)."""
    first = trace.first_render_ts
    if first is None:
        raise ReportError("no-media: nothing was rendered")
    return round((first - trace.player_start_us) / 1000, 1)


def nearest_rank(sorted_values: Sequence[float], q: float) -> float:
    if not sorted_values:
        raise ReportError("percentile of an empty sample")
    k = max(1, math.ceil(q * len(sorted_values)))
    return sorted_values[k - 1]


def e2e_latency_stats(samples: Iterable[LatencySample]) -> tuple[float, float]:
    """Mean and nearest-rank p95 latency in ms, 2 decimals."""
    lat = sorted(s.latency_us for s in samples)
    if not lat:
        raise ReportError("no latency samples")
    mean = sum(lat) / len(lat) / 1000
    return round(mean, 2), round(nearest_rank(lat, 0.95) / 1000, 2)


def interarrival_jitter(rows: Iterable[WirePacket]) -> float:
    """Smoothed transit-time variation in ms over delivered packets.

    Rows are taken in arrival order; for consecutive packets
    ``D = (recv_i - recv_j) - (send_i - send_j)`` and ``J += (|D| - J) / 16``.
    """
    pkts = sorted((p for p in rows if p.recv_ts is not None), key=lambda p: (p.recv_ts, p.seq))
    if len(pkts) < 2:
        raise ReportError("jitter needs at least two delivered packets")
    j = 0.0
    prev = pkts[0]
    for p in pkts[1:]:
        d = (p.recv_ts - prev.recv_ts) - (p.send_ts - prev.send_ts)
        j += (abs(d) - j) / 16
        prev = p
    return j / 1000


def throughput_usage(rows: Iterable[WirePacket], window_us: int) -> int:
    """Delivered wire bits per second over the window, in integer kbps."""
    if window_us < 1_000_000:
        raise ReportError(f"throughput window {window_us} us is shorter than 1 s")
    bits = 8 * sum(p.size_bytes for p in rows if p.recv_ts is not None)
    return int(bits * 1_000_000 / window_us / 1000)


def byte_loss(rows: Iterable[WirePacket]) -> float:
    """Wire-level byte loss in percent (2 decimals); retransmissions count as sent."""
    sent = delivered = 0
    for p in rows:
        sent += p.size_bytes
        if p.recv_ts is not None:
            delivered += p.size_bytes
    if sent == 0:
        raise ReportError("no bytes sent")
    return round((sent - delivered) / sent * 100, 2)


# ---------------------------------------------------------- trace views


def steady_window(trace) -> tuple[int, int]:
    first = trace.first_render_ts
    if first is None:
        raise ReportError("no-media: nothing was rendered")
    return first, max(first, trace.media_end_us)


def ingress_rows(trace, kinds=MEDIA_KINDS, window: tuple[int, int] | None = None) -> list[WirePacket]:
    """Packets on the link that feeds the player, optionally limited by kind and send time."""
    out = []
    for p in trace.capture.packets:
        if p.link != trace.ingress_link or p.dir != "fwd":
            continue
        if kinds is not None and p.kind not in kinds:
            continue
        if window is not None and not window[0] <= p.send_ts < window[1]:
            continue
        out.append(p)
    return out


def window_frames(trace) -> tuple[list[LatencySample], int, int]:
    """(samples, generated, rendered) for frames captured in the steady window."""
    lo, hi = steady_window(trace)
    samples = [s for s in trace.samples if lo <= s.capture_ts < hi]
    generated = {i for i, cts in trace.generated if lo <= cts < hi}
    rendered = {s.index for s in samples} & generated
    return samples, len(generated), len(rendered)


def build_report(trace, network: str | None = None) -> SessionReport:
    if trace.failure:
        raise ReportError(f"session failed: {trace.failure}")
    cfg = trace.config
    startup = startup_time(trace)
    lo, hi = steady_window(trace)
    samples, generated, rendered = window_frames(trace)
    mean, p95 = e2e_latency_stats(samples) if samples else (0.0, 0.0)
    media = ingress_rows(trace, window=(lo, hi))
    try:
        kbps = throughput_usage(
            [p for p in ingress_rows(trace, kinds=None) if p.recv_ts is not None and lo <= p.recv_ts < hi],
            hi - lo,
        )
    except ReportError:
        kbps = 0
    try:
        jitter = round(interarrival_jitter(media), 2)
    except ReportError:
        jitter = 0.0
    loss = byte_loss(media) if media else 0.0
    return SessionReport(
        protocol=ProtocolKind(cfg.protocol).label,
        profile=cfg.profile.label,
        network=network or cfg.net.label,
        startup_ms=startup,
        latency_mean_ms=mean,
        latency_p95_ms=p95,
        throughput_kbps=kbps,
        jitter_ms=jitter,
        byte_loss_pct=loss,
        frames_rendered=rendered,
        frames_lost=generated - rendered,
        late_frames=sum(1 for s in samples if s.late),
    )
