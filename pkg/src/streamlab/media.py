"""Synthetic CBR encoder, RTP (de)packetization, MoQ objects and the render sink."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable

from streamlab.core import ConfigError, EncodingProfile, TimeInstant, ticks_90khz

FRAME_HEADER = struct.Struct(">QQ")  # index (top bit = I frame), capture_ts
_I_FLAG = 1 << 63
RTP_HEADER = struct.Struct(">BBHII")
RTP_HEADER_LEN = 12
RTP_VERSION = 2
RTP_PAYLOAD_TYPE = 96
MOQ_OBJECT_HEADER = struct.Struct(">QIQI")  # group_id, object_id, capture_ts, payload len
MOQ_OBJECT_HEADER_LEN = 24

# Filler bytes all have the top bit set, so any 8-byte window decodes to a
# value >= 2**63 and can never be mistaken for a frame header.
_PATTERN = bytes(0x80 | ((i * 37 + 11) & 0x7F) for i in range(251))
_pattern_cache = _PATTERN * 64


class ClockViolation(RuntimeError):
    """A frame was rendered before it was captured."""


def _filler(n: int, offset: int) -> bytes:
    global _pattern_cache
    offset %= len(_PATTERN)
    while len(_pattern_cache) < n + offset:
        _pattern_cache = _pattern_cache * 2
    return _pattern_cache[offset:offset + n]


@dataclass(frozen=True, slots=True)
class MediaFrame:
    index: int
    kind: str  # "I" or "P"
    capture_ts: TimeInstant
    payload: bytes

    @property
    def payload_len(self) -> int:
        return len(self.payload)

    def header(self) -> tuple[int, int]:
        return unpack_frame_header(self.payload)[:2]


def pack_frame_header(index: int, capture_ts: int, key: bool) -> bytes:
    return FRAME_HEADER.pack(index | (_I_FLAG if key else 0), capture_ts)


def unpack_frame_header(data) -> tuple[int, int, str]:
    raw, cts = FRAME_HEADER.unpack_from(data)
    return raw & ~_I_FLAG, cts, "I" if raw & _I_FLAG else "P"


def gop_budget(profile: EncodingProfile) -> int:
    return profile.bitrate_kbps * 125 * profile.gop_size // profile.fps


def frame_size(profile: EncodingProfile, index: int) -> int:
    """Bytes for frame ``index`` of a CBR stream with one I frame per GOP.

    The GOP budget is split into one I frame of ``r * p`` and ``gop - 1`` P
    frames of ``p`` bytes; the integer remainder goes to the I frame.
    """
    g = profile.gop_size
    budget = gop_budget(profile)
    if budget < 16 * g:
        raise ConfigError(
            f"profile {profile.label}: GOP budget {budget} B is below {16 * g} B"
        )
    if g == 1:
        return budget
    p = int(budget // (profile.i_to_p_size_ratio + g - 1))
    if index % g:
        return max(p, 16)
    return budget - (g - 1) * p


def generate_frame(
    profile: EncodingProfile, index: int, capture_ts: TimeInstant | None = None, epoch_us: int = 0
) -> MediaFrame:
    if capture_ts is None:
        capture_ts = profile.capture_ts(index, epoch_us)
    size = frame_size(profile, index)
    kind = "I" if index % profile.gop_size == 0 else "P"
    payload = pack_frame_header(index, capture_ts, kind == "I") + _filler(size - 16, index)
    return MediaFrame(index, kind, capture_ts, payload)


# --------------------------------------------------------------------- RTP


@dataclass(slots=True)
class RtpPacket:
    ssrc: int
    seq: int
    timestamp: int
    marker: bool
    payload: bytes
    payload_type: int = RTP_PAYLOAD_TYPE

    @property
    def wire_size(self) -> int:
        return RTP_HEADER_LEN + len(self.payload)

    def to_bytes(self) -> bytes:
        b1 = (self.payload_type & 0x7F) | (0x80 if self.marker else 0)
        return RTP_HEADER.pack(
            RTP_VERSION << 6, b1, self.seq & 0xFFFF, self.timestamp & 0xFFFFFFFF, self.ssrc
        ) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "RtpPacket":
        if len(data) < RTP_HEADER_LEN:
            raise ValueError("RTP packet shorter than its header")
        b0, b1, seq, ts, ssrc = RTP_HEADER.unpack_from(data)
        if b0 >> 6 != RTP_VERSION:
            raise ValueError(f"bad RTP version {b0 >> 6}")
        return cls(ssrc, seq, ts, bool(b1 & 0x80), bytes(data[RTP_HEADER_LEN:]), b1 & 0x7F)


def packetize_rtp(frame: MediaFrame, mtu: int, ssrc: int, seq_start: int) -> list[RtpPacket]:
    """Split a frame into RTP packets whose size (header included) fits ``mtu``."""
    if mtu <= RTP_HEADER_LEN + 1:
        raise ValueError(f"mtu {mtu} leaves no room for RTP payload")
    data = frame.payload
    if not data:
        raise ValueError("cannot packetize an empty frame")
    step = mtu - RTP_HEADER_LEN
    ts = ticks_90khz(frame.capture_ts) & 0xFFFFFFFF
    chunks = [data[i:i + step] for i in range(0, len(data), step)]
    last = len(chunks) - 1
    return [
        RtpPacket(ssrc, (seq_start + k) & 0xFFFF, ts, k == last, chunk)
        for k, chunk in enumerate(chunks)
    ]


@dataclass(frozen=True, slots=True)
class FrameLoss:
    timestamp: int
    index: int  # -1 when the first fragment never arrived
    missing: int


class _Bucket:
    __slots__ = ("ts", "frags", "marker_seq", "first_seq", "index", "capture_ts", "kind")

    def __init__(self, ts):
        self.ts = ts
        self.frags = {}
        self.marker_seq = None
        self.first_seq = None
        self.index = -1
        self.capture_ts = None
        self.kind = "P"


class Depacketizer:
    """Reassembles frames of one RTP source.

    A frame is complete once its first fragment (recognised by the embedded
    frame header), its marker fragment and every sequence number in between
    are present.  :meth:`take_complete` emits in capture order and gives up
    on older incomplete frames as soon as a newer one completes, which is
    what a renderer without a jitter buffer does.  :meth:`drain` resolves
    everything at end of stream.
    """

    def __init__(self, ssrc: int | None = None):
        self.ssrc = ssrc
        self.buckets: dict[int, _Bucket] = {}
        self.duplicates = 0
        self.late = 0
        self.closed_upto: int | None = None  # highest timestamp already emitted
        self._last_ext: int | None = None

    def _unwrap(self, seq: int) -> int:
        if self._last_ext is None:
            self._last_ext = seq
            return seq
        delta = (seq - self._last_ext) & 0xFFFF
        if delta >= 0x8000:
            delta -= 0x10000
        ext = self._last_ext + delta
        if ext > self._last_ext:
            self._last_ext = ext
        return ext

    def push(self, pkt: RtpPacket) -> bool:
        if self.ssrc is None:
            self.ssrc = pkt.ssrc
        elif pkt.ssrc != self.ssrc:
            raise ValueError(f"packet from ssrc {pkt.ssrc:#x}, expected {self.ssrc:#x}")
        if self.closed_upto is not None and pkt.timestamp <= self.closed_upto:
            self.late += 1
            return False
        ext = self._unwrap(pkt.seq)
        b = self.buckets.get(pkt.timestamp)
        if b is None:
            b = self.buckets[pkt.timestamp] = _Bucket(pkt.timestamp)
        if ext in b.frags:
            self.duplicates += 1
            return False
        b.frags[ext] = pkt.payload
        if pkt.marker:
            b.marker_seq = ext
        if len(pkt.payload) >= 16:
            index, cts, kind = unpack_frame_header(pkt.payload)
            if cts < 1 << 62 and ticks_90khz(cts) & 0xFFFFFFFF == pkt.timestamp:
                b.first_seq, b.index, b.capture_ts, b.kind = ext, index, cts, kind
        return True

    @staticmethod
    def _complete(b: _Bucket) -> bool:
        if b.first_seq is None or b.marker_seq is None or b.marker_seq < b.first_seq:
            return False
        return len(b.frags) >= b.marker_seq - b.first_seq + 1 and all(
            s in b.frags for s in range(b.first_seq, b.marker_seq + 1)
        )

    def _emit(self, b: _Bucket, ordered: list[_Bucket], pos: int):
        del self.buckets[b.ts]
        self.closed_upto = b.ts
        if self._complete(b):
            payload = b"".join(b.frags[s] for s in range(b.first_seq, b.marker_seq + 1))
            return MediaFrame(b.index, b.kind, b.capture_ts, payload)
        return FrameLoss(b.ts, b.index, self._missing(b, ordered, pos))

    @staticmethod
    def _missing(b: _Bucket, ordered: list[_Bucket], pos: int) -> int:
        seqs = b.frags.keys()
        lo = b.first_seq
        if lo is None:
            prev = ordered[pos - 1] if pos > 0 else None
            lo = max(prev.frags) + 1 if prev is not None and prev.frags else min(seqs)
        hi = b.marker_seq
        if hi is None:
            nxt = ordered[pos + 1] if pos + 1 < len(ordered) else None
            hi = min(nxt.frags) - 1 if nxt is not None and nxt.frags else max(seqs)
        present = sum(1 for s in seqs if lo <= s <= hi)
        # an incomplete frame always misses at least one fragment
        return max(hi - lo + 1 - present, 1)

    def take_complete(self) -> list:
        out = []
        ordered = sorted(self.buckets.values(), key=lambda b: b.ts)
        done = [self._complete(b) for b in ordered]
        if not any(done):
            return out
        last_done = max(i for i, d in enumerate(done) if d)
        for i in range(last_done + 1):
            out.append(self._emit(ordered[i], ordered, i))
        return out

    def drain(self) -> list:
        ordered = sorted(self.buckets.values(), key=lambda b: b.ts)
        return [self._emit(b, ordered, i) for i, b in enumerate(ordered)]


def depacketize_rtp(packets: Iterable[RtpPacket]) -> list:
    """Batch reassembly: every frame (or FrameLoss) in capture order."""
    d = Depacketizer()
    for p in packets:
        d.push(p)
    return d.drain()


# --------------------------------------------------------------------- MoQ


@dataclass(frozen=True, slots=True)
class MoqObject:
    group_id: int
    object_id: int
    capture_ts: TimeInstant
    fmp4_overhead_len: int
    payload: bytes

    @property
    def wire_size(self) -> int:
        return MOQ_OBJECT_HEADER_LEN + self.fmp4_overhead_len + len(self.payload)

    def to_bytes(self) -> bytes:
        return (
            MOQ_OBJECT_HEADER.pack(self.group_id, self.object_id, self.capture_ts, len(self.payload))
            + _fmp4_box(self.fmp4_overhead_len)
            + self.payload
        )


def _fmp4_box(n: int) -> bytes:
    # stand-in for moof/mdat headers: a box header when it fits, zeros after
    if n >= 8:
        return struct.pack(">I4s", n, b"moof") + bytes(n - 8)
    return bytes(n)


def fragment_moq(frame: MediaFrame, fmp4_overhead: int, gop_size: int) -> MoqObject:
    if fmp4_overhead < 0:
        raise ValueError("fmp4_overhead must be >= 0")
    group, obj = divmod(frame.index, gop_size)
    return MoqObject(group, obj, frame.capture_ts, fmp4_overhead, frame.payload)


def defragment_moq(obj: MoqObject) -> MediaFrame:
    index, _, kind = unpack_frame_header(obj.payload)
    return MediaFrame(index, kind, obj.capture_ts, obj.payload)


class MoqObjectParser:
    """Incremental parser for objects laid back to back on a stream."""

    def __init__(self, fmp4_overhead: int):
        self.fmp4_overhead = fmp4_overhead
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[MoqObject]:
        self._buf += data
        out = []
        buf = self._buf
        pos = 0
        while len(buf) - pos >= MOQ_OBJECT_HEADER_LEN:
            group, obj, cts, n = MOQ_OBJECT_HEADER.unpack_from(buf, pos)
            end = pos + MOQ_OBJECT_HEADER_LEN + self.fmp4_overhead + n
            if len(buf) < end:
                break
            payload = bytes(buf[end - n:end])
            out.append(MoqObject(group, obj, cts, self.fmp4_overhead, payload))
            pos = end
        if pos:
            del buf[:pos]
        return out


# --------------------------------------------------------------- rendering


@dataclass(frozen=True, slots=True)
class LatencySample:
    index: int
    capture_ts: TimeInstant
    render_ts: TimeInstant
    late: bool = False

    @property
    def latency_us(self) -> int:
        return self.render_ts - self.capture_ts


class RenderSink:
    """Records per-frame glass-to-glass latency; the first sample marks startup."""

    def __init__(self):
        self.samples: list[LatencySample] = []
        self.rendered: set[int] = set()

    @property
    def first_render_ts(self) -> TimeInstant | None:
        return self.samples[0].render_ts if self.samples else None

    def receive(self, frame: MediaFrame, render_ts: TimeInstant, late: bool = False) -> LatencySample:
        if render_ts < frame.capture_ts:
            raise ClockViolation(
                f"frame {frame.index} rendered at {render_ts} before capture at {frame.capture_ts}"
            )
        sample = LatencySample(frame.index, frame.capture_ts, render_ts, late)
        self.samples.append(sample)
        self.rendered.add(frame.index)
        return sample


def render_sink_receive(sink: RenderSink, frame: MediaFrame, render_ts: TimeInstant) -> LatencySample:
    return sink.receive(frame, render_ts)
