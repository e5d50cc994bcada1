"""Deterministic datagram substrate: event loop, lossy/jittery links, capture log.

Emulated mode is single threaded: every callback runs from :meth:`EventLoop.run`.
:class:`SocketLink` offers the same ``send`` contract over real loopback UDP
sockets for sanity checks; it makes no determinism promises.
"""

from __future__ import annotations

import csv
import heapq
import io
import queue
import socket
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Callable

from streamlab.core import ConfigError, RngState, TimeInstant


@dataclass(frozen=True)
class JitterModel:
    kind: str = "none"  # none | uniform | normal
    amount_us: int = 0  # half-width for uniform, sigma for normal

    def __post_init__(self):
        if self.kind not in ("none", "uniform", "normal"):
            raise ConfigError(f"unknown jitter model {self.kind!r}")
        if self.amount_us < 0:
            raise ConfigError("jitter amount must be >= 0")

    def draw(self, rng: RngState) -> int:
        if self.kind == "uniform":
            return round(rng.uniform(-self.amount_us, self.amount_us))
        if self.kind == "normal":
            return round(rng.gauss(0.0, self.amount_us))
        return 0

    def scaled(self, factor: float) -> "JitterModel":
        return JitterModel(self.kind, round(self.amount_us * factor))

    @classmethod
    def from_spec(cls, spec) -> "JitterModel":
        if spec is None or spec == "none":
            return cls()
        if isinstance(spec, JitterModel):
            return spec
        if isinstance(spec, dict):
            unknown = set(spec) - {"kind", "amount_us", "amount_ms"}
            if unknown:
                raise ConfigError(f"unknown jitter keys {sorted(unknown)}")
            amount = spec.get("amount_us")
            if amount is None:
                amount = round(float(spec.get("amount_ms", 0)) * 1000)
            return cls(spec.get("kind", "none"), int(amount))
        raise ConfigError(f"bad jitter spec {spec!r}")


@dataclass(frozen=True)
class NetProfile:
    """One-way characteristics of a link."""

    one_way_delay_us: int = 0
    jitter: JitterModel = field(default_factory=JitterModel)
    loss_rate: float = 0.0
    bandwidth_kbps: int | None = None
    reorder: bool = False
    name: str = ""

    def __post_init__(self):
        if self.one_way_delay_us < 0:
            raise ConfigError("one_way_delay_us must be >= 0")
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ConfigError("loss_rate must lie in [0, 1]")
        if self.bandwidth_kbps is not None and self.bandwidth_kbps <= 0:
            raise ConfigError("bandwidth_kbps must be positive when set")

    @property
    def label(self) -> str:
        return self.name or "custom"

    @property
    def min_delay_us(self) -> int:
        if self.jitter.kind == "uniform":
            return max(0, self.one_way_delay_us - self.jitter.amount_us)
        if self.jitter.kind == "normal":
            return 0
        return self.one_way_delay_us

    def with_(self, **changes) -> "NetProfile":
        return replace(self, **changes)

    def split(self, fraction: float) -> "NetProfile":
        """The share of this path covered by one segment of a relayed path.

        Delay scales linearly, jitter so that variances add up, and loss so
        that the end-to-end survival probability is preserved.
        """
        return replace(
            self,
            one_way_delay_us=round(self.one_way_delay_us * fraction),
            jitter=self.jitter.scaled(fraction ** 0.5),
            loss_rate=1.0 - (1.0 - self.loss_rate) ** fraction,
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "one_way_delay_us": self.one_way_delay_us,
            "jitter": {"kind": self.jitter.kind, "amount_us": self.jitter.amount_us},
            "loss_rate": self.loss_rate,
            "bandwidth_kbps": self.bandwidth_kbps,
            "reorder": self.reorder,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetProfile":
        allowed = {"name", "one_way_delay_us", "one_way_delay_ms", "jitter", "loss_rate",
                   "bandwidth_kbps", "reorder"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown network keys {sorted(unknown)}")
        delay = d.get("one_way_delay_us")
        if delay is None:
            delay = round(float(d.get("one_way_delay_ms", 0)) * 1000)
        return cls(
            one_way_delay_us=int(delay),
            jitter=JitterModel.from_spec(d.get("jitter")),
            loss_rate=float(d.get("loss_rate", 0.0)),
            bandwidth_kbps=d.get("bandwidth_kbps"),
            reorder=bool(d.get("reorder", False)),
            name=d.get("name", "inline"),
        )


NET_PRESETS: dict[str, NetProfile] = {
    "wifi-like": NetProfile(5_000, JitterModel("uniform", 3_000), 0.005, name="wifi-like"),
    "5g-like": NetProfile(12_000, JitterModel("uniform", 500), 0.002, name="5g-like"),
    "lossless": NetProfile(10_000, name="lossless"),
}


def resolve_network(spec) -> NetProfile:
    if isinstance(spec, NetProfile):
        return spec
    if isinstance(spec, str):
        try:
            return NET_PRESETS[spec]
        except KeyError:
            raise ConfigError(f"unknown network preset {spec!r}") from None
    if isinstance(spec, dict):
        return NetProfile.from_dict(spec)
    raise ConfigError(f"bad network spec {spec!r}")


# ------------------------------------------------------------- event loop


class EventLoop:
    """Discrete-event scheduler; ties resolve by insertion order."""

    def __init__(self):
        self.now: TimeInstant = 0
        self._queue: list = []
        self._seq = 0
        self.processed = 0
        self._stopped = False

    def stop(self) -> None:
        """Make :meth:`run` return after the current event."""
        self._stopped = True

    def schedule(self, t: TimeInstant, fn: Callable, *args) -> None:
        if t < self.now:
            raise ValueError(f"cannot schedule in the past ({t} < {self.now})")
        heapq.heappush(self._queue, (t, self._seq, fn, args))
        self._seq += 1

    def call_later(self, delay: int, fn: Callable, *args) -> None:
        self.schedule(self.now + delay, fn, *args)

    def __len__(self):
        return len(self._queue)

    def advance(self):
        """Pop the next event as ``(t, fn, args)``; IndexError when empty."""
        if not self._queue:
            raise IndexError("event queue empty: simulation ended")
        t, _, fn, args = heapq.heappop(self._queue)
        self.now = t
        return t, fn, args

    def run(self, until: TimeInstant | None = None) -> None:
        q = self._queue
        pop = heapq.heappop
        self._stopped = False
        while q and not self._stopped:
            if until is not None and q[0][0] > until:
                self.now = until
                return
            t, _, fn, args = pop(q)
            self.now = t
            self.processed += 1
            fn(*args)


def advance(loop: EventLoop):
    return loop.advance()


# ------------------------------------------------------------ wire + links

CAPTURE_HEADER = ["seq", "proto", "link", "dir", "send_us", "recv_us", "size_bytes", "kind", "dropped"]


class WirePacket:
    """One datagram on the emulated wire; doubles as the capture-log record."""

    __slots__ = ("seq", "proto", "link", "dir", "send_ts", "recv_ts", "size_bytes", "kind", "frame")

    def __init__(self, seq, proto, link, dir, send_ts, recv_ts, size_bytes, kind, frame=-1):
        self.seq = seq
        self.proto = proto
        self.link = link
        self.dir = dir
        self.send_ts = send_ts
        self.recv_ts = recv_ts
        self.size_bytes = size_bytes
        self.kind = kind
        self.frame = frame

    @property
    def dropped(self) -> bool:
        return self.recv_ts is None

    def row(self) -> list:
        return [
            self.seq, self.proto, self.link, self.dir, self.send_ts,
            "" if self.recv_ts is None else self.recv_ts,
            self.size_bytes, self.kind, int(self.recv_ts is None),
        ]

    def __repr__(self):
        return (f"WirePacket(seq={self.seq}, link={self.link}/{self.dir}, send={self.send_ts}, "
                f"recv={self.recv_ts}, size={self.size_bytes}, kind={self.kind})")


class CaptureLog:
    """Session-wide capture; assigns the global ``seq`` column."""

    def __init__(self, proto: str = ""):
        self.proto = proto
        self.packets: list[WirePacket] = []

    def record(self, link, dir, send_ts, recv_ts, size, kind, frame=-1) -> WirePacket:
        p = WirePacket(len(self.packets), self.proto, link, dir, send_ts, recv_ts, size, kind, frame)
        self.packets.append(p)
        return p

    def rows(self) -> list[WirePacket]:
        return sorted(self.packets, key=lambda p: (p.send_ts, p.seq))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CAPTURE_HEADER)
        for p in self.rows():
            w.writerow(p.row())
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def read_capture_csv(path_or_text) -> list[WirePacket]:
    if "\n" in str(path_or_text):
        fh = io.StringIO(path_or_text)
    else:
        fh = open(path_or_text, newline="")
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CAPTURE_HEADER:
            raise ValueError(f"unexpected capture header {reader.fieldnames}")
        out = []
        for r in reader:
            recv = None if r["recv_us"] == "" else int(r["recv_us"])
            out.append(WirePacket(int(r["seq"]), r["proto"], r["link"], r["dir"], int(r["send_us"]),
                                  recv, int(r["size_bytes"]), r["kind"]))
        return out


class LinkRefused(ValueError):
    """Payload larger than the link MTU."""


class Link:
    """One direction of an emulated path.

    Delivery time is ``send + serialization + delay + jitter``; with a
    bandwidth cap packets also queue behind each other.  Unless the profile
    allows reordering, deliveries keep send order.
    """

    def __init__(self, loop: EventLoop, profile: NetProfile, rng: RngState, *, name: str,
                 dir: str = "fwd", capture: CaptureLog | None = None, mtu: int = 1500,
                 deliver: Callable | None = None):
        self.loop = loop
        self.profile = profile
        self.rng = rng
        self.name = name
        self.dir = dir
        self.capture = capture if capture is not None else CaptureLog()
        self.mtu = mtu
        self.deliver = deliver
        self.open = True
        self.sent = 0
        self.dropped = 0
        self.drop_script: set[int] = set()
        self._busy_until = 0
        self._last_recv = 0

    def send(self, payload, size: int, kind: str = "", frame: int = -1,
             send_ts: TimeInstant | None = None) -> WirePacket:
        if not self.open:
            raise RuntimeError(f"link {self.name} is closed")
        if size > self.mtu:
            raise LinkRefused(f"{size} B exceeds link MTU {self.mtu} B")
        t = self.loop.now if send_ts is None else send_ts
        prof = self.profile
        ordinal = self.sent
        self.sent += 1
        # both draws happen for every packet so the stream stays aligned
        lost = self.rng.random() < prof.loss_rate
        jitter = prof.jitter.draw(self.rng)
        if ordinal in self.drop_script:
            lost = True
        start = t
        if prof.bandwidth_kbps:
            start = max(t, self._busy_until)
            ser = (size * 8000 + prof.bandwidth_kbps - 1) // prof.bandwidth_kbps
            self._busy_until = start + ser
            start += ser
        if lost:
            self.dropped += 1
            return self.capture.record(self.name, self.dir, t, None, size, kind, frame)
        recv = start + max(0, prof.one_way_delay_us + jitter)
        if not prof.reorder and recv < self._last_recv:
            recv = self._last_recv
        self._last_recv = recv
        pkt = self.capture.record(self.name, self.dir, t, recv, size, kind, frame)
        if self.deliver is not None:
            self.loop.schedule(recv, self.deliver, payload)
        return pkt

    def close(self):
        self.open = False


def link_send(link: Link, payload, size: int, send_ts: TimeInstant | None = None, kind: str = "") -> WirePacket:
    return link.send(payload, size, kind=kind, send_ts=send_ts)


class Path:
    """Duplex path between two named endpoints (``fwd`` is a -> b)."""

    def __init__(self, loop: EventLoop, name: str, profile: NetProfile, rng: RngState,
                 capture: CaptureLog, mtu: int = 1500, reverse_profile: NetProfile | None = None):
        self.name = name
        self.fwd = Link(loop, profile, rng.substream(name, "fwd"), name=name, dir="fwd",
                        capture=capture, mtu=mtu)
        self.rev = Link(loop, reverse_profile or profile, rng.substream(name, "rev"), name=name,
                        dir="rev", capture=capture, mtu=mtu)


# ------------------------------------------------------- real-socket backend


class SocketLink:
    """Loopback UDP link with the ``Link.send`` contract (no determinism).

    One egress thread applies loss and delay and writes to the socket; one
    ingress thread reads and hands payloads to ``deliver``.  The two threads
    share nothing but queues.
    """

    def __init__(self, profile: NetProfile, *, mtu: int = 1500, deliver: Callable | None = None,
                 seed: int = 0, name: str = "socket"):
        self.profile = profile
        self.mtu = mtu
        self.deliver = deliver
        self.name = name
        self.rng = RngState(seed)
        self.capture = CaptureLog("socket")
        self.received: "queue.Queue[bytes]" = queue.Queue()
        self._t0 = time.monotonic()
        self._rx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._rx.bind(("127.0.0.1", 0))
        self._rx.settimeout(0.05)
        self._tx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._addr = self._rx.getsockname()
        self._egress: "queue.PriorityQueue" = queue.PriorityQueue()
        self._stop = threading.Event()
        self._n = 0
        self._threads = [
            threading.Thread(target=self._egress_loop, daemon=True),
            threading.Thread(target=self._ingress_loop, daemon=True),
        ]
        for th in self._threads:
            th.start()

    def _now_us(self) -> int:
        return int((time.monotonic() - self._t0) * 1_000_000)

    def send(self, payload: bytes, size: int | None = None, kind: str = "", frame: int = -1,
             send_ts=None) -> WirePacket:
        size = len(payload) if size is None else size
        if size > self.mtu:
            raise LinkRefused(f"{size} B exceeds link MTU {self.mtu} B")
        t = self._now_us()
        lost = self.rng.random() < self.profile.loss_rate
        jitter = self.profile.jitter.draw(self.rng)
        if lost:
            return self.capture.record(self.name, "fwd", t, None, size, kind, frame)
        due = t + max(0, self.profile.one_way_delay_us + jitter)
        self._n += 1
        self._egress.put((due, self._n, payload))
        return self.capture.record(self.name, "fwd", t, due, size, kind, frame)

    def _egress_loop(self):
        while not self._stop.is_set():
            try:
                due, n, payload = self._egress.get(timeout=0.05)
            except queue.Empty:
                continue
            wait = (due - self._now_us()) / 1e6
            if wait > 0:
                time.sleep(wait)
            self._tx.sendto(payload, self._addr)

    def _ingress_loop(self):
        while not self._stop.is_set():
            try:
                data, _ = self._rx.recvfrom(65536)
            except (socket.timeout, OSError):
                continue
            if self.deliver is not None:
                self.deliver(data)
            else:
                self.received.put(data)

    def close(self):
        self._stop.set()
        for th in self._threads:
            th.join(timeout=1)
        self._rx.close()
        self._tx.close()
