"""The three streaming setups, each as event-driven publisher/relay/player state machines.

Topologies (``fwd`` is always the direction towards the player)::

    webrtc   publisher --pub-sig--> signaling --sig-player--> player
             publisher ------------pub-player-------------> player   (RTP over UDP-like datagrams)
    roq      publisher ------------pub-player-------------> player   (quiclite, RTP per datagram or stream)
    moq      publisher --pub-relay--> relay --relay-player--> player  (quiclite streams, one per group)

Senders pace each frame's packets evenly over ``RunConfig.pacing_window_us``
(a stand-in for the encoder/pacer output rate), so a frame of ``n`` packets
finishes leaving the sender ``(n-1)/n`` of a window after capture.  The relay
stores whole objects and paces them out again, which is where its extra
latency comes from.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass, field
from enum import IntEnum

from streamlab.core import ConfigError, ProtocolKind, RngState, RunConfig, TimeInstant
from streamlab.media import (
    Depacketizer,
    FrameLoss,
    MediaFrame,
    MoqObject,
    MoqObjectParser,
    RenderSink,
    RtpPacket,
    defragment_moq,
    fragment_moq,
    generate_frame,
    packetize_rtp,
    unpack_frame_header,
)
from streamlab.netem import CaptureLog, EventLoop, Link, NetProfile, Path
from streamlab.quiclite import ConnectError, Connection

UDP_FRAMING = 8
TRACK_NAME = "live/video"


class SessionFailure(RuntimeError):
    pass


class SubscribeError(RuntimeError):
    pass


# ------------------------------------------------------------- signaling

# type(1) session_id(8) seq(4) body_len(2) body
SIG_HEADER = struct.Struct(">BQIH")


class SigType(IntEnum):
    OFFER = 1
    ANSWER = 2
    CANDIDATE = 3
    CANDIDATE_ACK = 4
    CHECK = 5
    CHECK_ACK = 6


# rough SDP / ICE message sizes
SIG_BODY_BYTES = {
    SigType.OFFER: 900,
    SigType.ANSWER: 900,
    SigType.CANDIDATE: 240,
    SigType.CANDIDATE_ACK: 40,
    SigType.CHECK: 100,
    SigType.CHECK_ACK: 100,
}

_RESPONSE = {
    SigType.OFFER: SigType.ANSWER,
    SigType.CANDIDATE: SigType.CANDIDATE_ACK,
    SigType.CHECK: SigType.CHECK_ACK,
}


@dataclass(frozen=True)
class SignalingMessage:
    type: SigType
    session_id: int
    seq: int
    body: bytes = b""

    @property
    def wire_size(self) -> int:
        return SIG_HEADER.size + len(self.body)

    @property
    def is_request(self) -> bool:
        return self.type in _RESPONSE

    def to_bytes(self) -> bytes:
        return SIG_HEADER.pack(self.type, self.session_id, self.seq, len(self.body)) + self.body

    @classmethod
    def from_bytes(cls, data: bytes) -> "SignalingMessage":
        t, sid, seq, n = SIG_HEADER.unpack_from(data)
        body = bytes(data[SIG_HEADER.size:SIG_HEADER.size + n])
        if len(body) != n:
            raise ValueError("truncated signaling message")
        return cls(SigType(t), sid, seq, body)


def _sig_message(t: SigType, session_id: int, seq: int) -> SignalingMessage:
    return SignalingMessage(t, session_id, seq, bytes(SIG_BODY_BYTES[t]))


class SignalingSession:
    """Offer/answer plus candidate exchanges, one endpoint's view.

    The publisher sends requests, the player answers them.  Exchange 0 is
    offer/answer, the last one (when there are several) a connectivity
    check, anything in between a candidate exchange.
    """

    def __init__(self, role: str, rtts_required: int = 3, session_id: int = 1):
        if role not in ("publisher", "player"):
            raise ValueError("role must be 'publisher' or 'player'")
        if rtts_required < 1:
            raise ConfigError("rtts_required must be >= 1")
        self.role = role
        self.rtts_required = rtts_required
        self.session_id = session_id
        self.exchanges_done = 0
        self.state = "AwaitOffer" if role == "player" else "Idle"

    @property
    def connected(self) -> bool:
        return self.state == "Connected"

    def _request_type(self, k: int) -> SigType:
        if k == 0:
            return SigType.OFFER
        if k == self.rtts_required - 1:
            return SigType.CHECK
        return SigType.CANDIDATE

    def next_request(self) -> SignalingMessage:
        if self.role != "publisher" or self.connected:
            raise RuntimeError("no request to send")
        k = self.exchanges_done
        self.state = "AwaitAnswer" if k == 0 else "AwaitCandidates"
        return _sig_message(self._request_type(k), self.session_id, k)

    def on_request(self, msg: SignalingMessage) -> SignalingMessage | None:
        """Player side: answer a request (again, if it is a retransmission)."""
        if msg.session_id != self.session_id or not msg.is_request:
            return None
        if msg.seq > self.exchanges_done:
            return None
        if msg.seq == self.exchanges_done:
            self.exchanges_done += 1
            self.state = "Connected" if self.exchanges_done >= self.rtts_required else "AwaitCandidates"
        return _sig_message(_RESPONSE[msg.type], self.session_id, msg.seq)

    def on_response(self, msg: SignalingMessage) -> bool:
        """Publisher side; True when this response completes an exchange."""
        if msg.session_id != self.session_id or msg.is_request:
            return False
        if msg.seq != self.exchanges_done or self.connected:
            return False
        self.exchanges_done += 1
        if self.exchanges_done >= self.rtts_required:
            self.state = "Connected"
        return True


# ---------------------------------------------------------- jitter buffer


class JitterBuffer:
    """Playout buffer anchored on the first frame to arrive.

    A frame's deadline is ``first_arrival + target + (capture - first_capture)``.
    Frames that arrive after their deadline go out at once, flagged late;
    frames older than the last released one are dropped.
    """

    def __init__(self, target_delay_us: int = 50_000):
        if target_delay_us < 0:
            raise ValueError("target_delay_us must be >= 0")
        self.target_delay_us = target_delay_us
        self._heap: list = []
        self.first_arrival: TimeInstant | None = None
        self.first_capture: TimeInstant | None = None
        self.last_released: TimeInstant | None = None
        self.dropped = 0
        self.late = 0

    def __len__(self):
        return len(self._heap)

    def deadline(self, capture_ts: TimeInstant) -> TimeInstant:
        return self.first_arrival + self.target_delay_us + (capture_ts - self.first_capture)

    def push(self, frame: MediaFrame, now: TimeInstant) -> TimeInstant | None:
        """Hold ``frame``; returns when it should be released, or None if dropped."""
        if self.first_arrival is None:
            self.first_arrival = now
            self.first_capture = frame.capture_ts
        if self.last_released is not None and frame.capture_ts <= self.last_released:
            self.dropped += 1
            return None
        dl = self.deadline(frame.capture_ts)
        heapq.heappush(self._heap, (frame.capture_ts, frame.index, dl, now, frame))
        return max(dl, now)

    def release(self, now: TimeInstant) -> list[tuple[MediaFrame, bool]]:
        out = []
        h = self._heap
        while h and h[0][2] <= now:
            _, _, dl, arrival, frame = heapq.heappop(h)
            late = arrival > dl
            self.late += late
            self.last_released = frame.capture_ts
            out.append((frame, late))
        return out


def jitter_buffer_release(buffer: JitterBuffer, now: TimeInstant) -> list[tuple[MediaFrame, bool]]:
    return buffer.release(now)


# ------------------------------------------------------------ RoQ framing


class RoqFlow:
    """RTP over a quiclite connection, tagged with a one-byte varint flow id.

    Datagram mode puts the flow id in the datagram header's context byte,
    one RTP packet per datagram.  Stream mode writes the flow id once at
    the start of a single stream, then 2-byte length-prefixed RTP packets.
    """

    def __init__(self, conn: Connection, flow_id: int = 0, mode: str = "datagram"):
        if not 0 <= flow_id < 64:
            raise ValueError("flow_id must fit a one-byte varint")
        if mode not in ("datagram", "stream"):
            raise ValueError(f"unknown RoQ mode {mode!r}")
        self.conn = conn
        self.flow_id = flow_id
        self.mode = mode
        self.stream_id: int | None = None
        self._rx = bytearray()
        self._rx_flow: int | None = None

    @property
    def rtp_mtu(self) -> int:
        if self.mode == "datagram":
            return self.conn.max_datagram_payload
        return self.conn.max_stream_payload - 2

    def open(self):
        if self.mode == "stream":
            self.stream_id = self.conn.open_stream()
            self.conn.stream_send(self.stream_id, bytes([self.flow_id]), kind="ctrl")

    def send(self, pkt: RtpPacket, kind: str = "", frame: int = -1):
        if self.mode == "datagram":
            self.conn.datagram_send(pkt, flow_id=self.flow_id, kind=kind, frame=frame)
        else:
            raw = pkt.to_bytes()
            self.conn.stream_send(self.stream_id, struct.pack(">H", len(raw)) + raw, kind=kind,
                                  frame=frame)

    def feed_stream(self, data: bytes) -> list[RtpPacket]:
        self._rx += data
        buf = self._rx
        if self._rx_flow is None:
            if not buf:
                return []
            self._rx_flow = buf[0]
            del buf[:1]
        out = []
        pos = 0
        while len(buf) - pos >= 2:
            (n,) = struct.unpack_from(">H", buf, pos)
            if len(buf) - pos - 2 < n:
                break
            out.append(RtpPacket.from_bytes(bytes(buf[pos + 2:pos + 2 + n])))
            pos += 2 + n
        del buf[:pos]
        return out


# ---------------------------------------------------------------- MoQ relay

# type(1) len(2) request_id(4) then per type:
#   SUBSCRIBE        filter(1) track name (utf-8)
#   SUBSCRIBE_OK     start_group(8)
#   SUBSCRIBE_ERROR  code(2)
CTRL_HEADER = struct.Struct(">BHI")
CTRL_SUBSCRIBE = 0x03
CTRL_SUBSCRIBE_OK = 0x04
CTRL_SUBSCRIBE_ERROR = 0x05
FILTER_CODES = {"latest_group": 1, "next_group": 2}


def encode_control(kind: int, request_id: int, body: bytes) -> bytes:
    return CTRL_HEADER.pack(kind, len(body), request_id) + body


def decode_controls(buf: bytearray) -> list[tuple[int, int, bytes]]:
    out = []
    pos = 0
    while len(buf) - pos >= CTRL_HEADER.size:
        kind, n, rid = CTRL_HEADER.unpack_from(buf, pos)
        end = pos + CTRL_HEADER.size + n
        if len(buf) < end:
            break
        out.append((kind, rid, bytes(buf[pos + CTRL_HEADER.size:end])))
        pos = end
    del buf[:pos]
    return out


class _Subscriber:
    def __init__(self, conn: Connection, start_group: int):
        self.conn = conn
        self.start_group = start_group
        self.group_streams: dict[int, int] = {}
        self.cursor: tuple[int, int] | None = None


class RelayState:
    """Buffers the current group of each track and fans objects out."""

    def __init__(self, loop: EventLoop, *, pacing_us: int, fmp4_overhead: int):
        self.loop = loop
        self.pacing_us = pacing_us
        self.fmp4_overhead = fmp4_overhead
        self.tracks: dict[str, list[MoqObject]] = {}
        self.subscribers: dict[str, list[_Subscriber]] = {}
        self.publisher_conn: Connection | None = None
        self.subscriber_conns: list[Connection] = []
        self.received = 0
        self._parsers: dict[int, MoqObjectParser] = {}
        self._control: dict[int, bytearray] = {}

    # publisher side
    def attach_publisher(self, conn: Connection, track: str = TRACK_NAME):
        self.publisher_conn = conn
        self.tracks.setdefault(track, [])
        self.subscribers.setdefault(track, [])
        conn.on_stream_data = lambda c, sid, data: self._on_publisher_data(track, sid, data)

    def _on_publisher_data(self, track: str, sid: int, data: bytes):
        parser = self._parsers.get(sid)
        if parser is None:
            parser = self._parsers[sid] = MoqObjectParser(self.fmp4_overhead)
        for obj in parser.feed(data):
            self.add_object(track, obj)

    def add_object(self, track: str, obj: MoqObject):
        buf = self.tracks[track]
        if buf and obj.group_id > buf[-1].group_id:
            buf.clear()  # only the current group is retained
        buf.append(obj)
        self.received += 1
        for sub in self.subscribers[track]:
            self._forward(sub, obj)

    @property
    def current_group(self) -> int | None:
        buf = self.tracks.get(TRACK_NAME)
        return buf[-1].group_id if buf else None

    # subscriber side
    def attach_subscriber(self, conn: Connection):
        self.subscriber_conns.append(conn)
        conn.on_stream_data = lambda c, sid, data: self._on_control(c, sid, data)

    def _on_control(self, conn: Connection, sid: int, data: bytes):
        buf = self._control.setdefault(id(conn) ^ sid, bytearray())
        buf += data
        for kind, rid, body in decode_controls(buf):
            if kind != CTRL_SUBSCRIBE:
                continue
            filt = body[0]
            track = body[1:].decode()
            if track not in self.tracks:
                conn.stream_send(sid, encode_control(CTRL_SUBSCRIBE_ERROR, rid, struct.pack(">H", 404)),
                                 kind="ctrl")
                continue
            self.subscribe(conn, sid, rid, track, filt)

    def subscribe(self, conn: Connection, sid: int, rid: int, track: str, filt: int):
        buf = self.tracks[track]
        if not buf:
            start = 0
        elif filt == FILTER_CODES["next_group"]:
            start = buf[-1].group_id + 1
        else:
            start = buf[-1].group_id
        conn.stream_send(sid, encode_control(CTRL_SUBSCRIBE_OK, rid, struct.pack(">Q", start)),
                         kind="ctrl")
        sub = _Subscriber(conn, start)
        self.subscribers[track].append(sub)
        # stored objects go out back to back; only live ones are paced
        for obj in list(buf):
            self._forward(sub, obj, paced=False)

    def _forward(self, sub: _Subscriber, obj: MoqObject, paced: bool = True):
        if obj.group_id < sub.start_group:
            return
        key = (obj.group_id, obj.object_id)
        if sub.cursor is not None and key <= sub.cursor:
            return
        sub.cursor = key
        sid = sub.group_streams.get(obj.group_id)
        if sid is None:
            sid = sub.group_streams[obj.group_id] = sub.conn.open_stream()
        index, _, kind = _header_of(obj)
        sub.conn.stream_send(sid, obj.to_bytes(), kind=kind, frame=index,
                             spread_us=self.pacing_us if paced else 0)


def _header_of(obj: MoqObject):
    return unpack_frame_header(obj.payload)


# ----------------------------------------------------------- session trace


@dataclass
class SessionTrace:
    """Everything metrics need from one finished session."""

    config: RunConfig
    capture: CaptureLog
    samples: list
    player_start_us: TimeInstant
    media_end_us: TimeInstant
    ingress_link: str
    generated: list[tuple[int, TimeInstant]] = field(default_factory=list)
    losses: list = field(default_factory=list)
    events: list[tuple[TimeInstant, str]] = field(default_factory=list)
    failure: str | None = None
    stats: dict = field(default_factory=dict)

    @property
    def first_render_ts(self) -> TimeInstant | None:
        return self.samples[0].render_ts if self.samples else None


def _pace(loop: EventLoop, n: int, window_us: int, fn, *args):
    """Call ``fn(k, *args)`` for k < n spread evenly over ``window_us``."""
    now = loop.now
    fn(0, *args)
    for k in range(1, n):
        loop.schedule(now + k * window_us // n, fn, k, *args)


class _Session:
    kind: ProtocolKind

    def __init__(self, config: RunConfig):
        self.config = config
        self.loop = EventLoop()
        self.capture = CaptureLog(config.protocol.value)
        self.net_rng = RngState(config.network_seed).substream("netem")
        self.rng = RngState(config.seed).substream("session", config.protocol.value)
        self.sink = RenderSink()
        self.profile = config.effective_profile
        self.generated: list[tuple[int, int]] = []
        self.losses: list = []
        self.events: list[tuple[int, str]] = []
        self.failure: str | None = None
        self.player_start = 0
        self.media_end = config.duration_us
        self.mtu = config.mtu_bytes

    def path(self, name: str, profile: NetProfile) -> Path:
        return Path(self.loop, name, profile, self.net_rng, self.capture, mtu=self.mtu)

    def event(self, label: str):
        self.events.append((self.loop.now, label))

    def fail(self, why: str):
        if self.failure is None:
            self.failure = why
            self.event(f"failure: {why}")

    def start_encoder(self, epoch: int, on_frame, media_end: int | None = None):
        """Generate frames from ``epoch`` until ``media_end`` (default: duration later)."""
        self.event("encoder start")
        self.media_end = epoch + self.config.duration_us if media_end is None else media_end
        self.loop.schedule(self.media_end + round(self.config.drain_s * 1_000_000), self.loop.stop)
        self._emit_frame(0, epoch, on_frame)

    def _emit_frame(self, i: int, epoch: int, on_frame):
        frame = generate_frame(self.profile, i, epoch_us=epoch)
        self.generated.append((frame.index, frame.capture_ts))
        on_frame(frame)
        nxt = self.profile.capture_ts(i + 1, epoch)
        if nxt < self.media_end:
            self.loop.schedule(nxt, self._emit_frame, i + 1, epoch, on_frame)

    def render(self, frame: MediaFrame, late: bool = False):
        self.sink.receive(frame, self.loop.now, late)

    def run(self) -> SessionTrace:
        self.setup()
        # stops at media end + drain once the encoder runs; the horizon only
        # matters when setup never gets that far
        horizon = self.player_start + self.config.duration_us + 60 * 1_000_000
        self.loop.run(until=horizon)
        self.finish()
        return SessionTrace(
            config=self.config,
            capture=self.capture,
            samples=self.sink.samples,
            player_start_us=self.player_start,
            media_end_us=self.media_end,
            ingress_link=self.ingress_link,
            generated=self.generated,
            losses=self.losses,
            events=self.events,
            failure=self.failure,
            stats=self.stats(),
        )

    def setup(self):
        raise NotImplementedError

    def finish(self):
        pass

    def stats(self) -> dict:
        return {}


class _RtpPlayer:
    """Depacketizer front end shared by the WebRTC-like and RoQ players."""

    def __init__(self, session: _Session, on_frame):
        self.session = session
        self.depack = Depacketizer()
        self.on_frame = on_frame

    def push(self, pkt: RtpPacket):
        d = self.depack
        if not d.push(pkt):
            return
        b = d.buckets.get(pkt.timestamp)
        if b is None or not d._complete(b):
            return
        self._deliver(d.take_complete())

    def _deliver(self, items):
        for item in items:
            if isinstance(item, FrameLoss):
                self.session.losses.append(item)
            else:
                self.on_frame(item)

    def drain(self):
        for item in self.depack.drain():
            if isinstance(item, FrameLoss):
                self.session.losses.append(item)


def _expected_rtt(profile: NetProfile) -> int:
    return max(2 * profile.one_way_delay_us, 1000)


# ------------------------------------------------------------ WebRTC-like


class WebRtcLikeSession(_Session):
    kind = ProtocolKind.WEBRTC_LIKE
    ingress_link = "pub-player"
    MAX_SIGNALING_ATTEMPTS = 8

    def setup(self):
        cfg = self.config
        hop = cfg.net.split(0.5)
        self.p_sig = self.path("pub-sig", hop)
        self.sig_player = self.path("sig-player", hop)
        self.media = self.path("pub-player", cfg.net)
        sid = self.rng.below(1 << 32) + 1
        self.pub_sig = SignalingSession("publisher", cfg.signaling_rtts, sid)
        self.player_sig = SignalingSession("player", cfg.signaling_rtts, sid)
        # the signaling server just relays between its two links
        self.p_sig.fwd.deliver = lambda m: self._sig_send(self.sig_player.fwd, m)
        self.sig_player.rev.deliver = lambda m: self._sig_send(self.p_sig.rev, m)
        self.sig_player.fwd.deliver = self._player_on_signal
        self.p_sig.rev.deliver = self._publisher_on_signal
        self.media.fwd.deliver = self._player_on_media
        self.jb = JitterBuffer(cfg.jitter_buffer_us)
        self.player = _RtpPlayer(self, self._player_on_frame)
        self.ssrc = self.rng.below(1 << 32)
        self.rtp_seq = self.rng.below(1 << 16)
        self.sig_timeout = 3 * _expected_rtt(cfg.net)
        self._attempt = 0
        self.event("player start")
        self._publisher_request()

    @staticmethod
    def _sig_send(link: Link, msg: SignalingMessage):
        link.send(msg, UDP_FRAMING + msg.wire_size, kind="sig")

    def _publisher_request(self):
        msg = self.pub_sig.next_request()
        self._attempt = 0
        self._send_request(msg)

    def _send_request(self, msg: SignalingMessage):
        self._sig_send(self.p_sig.fwd, msg)
        self.loop.call_later(self.sig_timeout << self._attempt, self._request_timeout, msg,
                             self._attempt)

    def _request_timeout(self, msg: SignalingMessage, attempt: int):
        if self.pub_sig.exchanges_done > msg.seq or attempt != self._attempt:
            return
        self._attempt += 1
        if self._attempt >= self.MAX_SIGNALING_ATTEMPTS:
            self.fail("signaling timed out")
            return
        self._send_request(msg)

    def _player_on_signal(self, msg: SignalingMessage):
        reply = self.player_sig.on_request(msg)
        if reply is not None:
            self._sig_send(self.sig_player.rev, reply)

    def _publisher_on_signal(self, msg: SignalingMessage):
        if not self.pub_sig.on_response(msg):
            return
        if self.pub_sig.connected:
            self.event("connected")
            epoch = self.loop.now + self.config.encoder_start_us
            self.loop.schedule(epoch, self.start_encoder, epoch, self._publisher_on_frame)
        else:
            self._publisher_request()

    def _publisher_on_frame(self, frame: MediaFrame):
        pkts = packetize_rtp(frame, self.mtu - UDP_FRAMING, self.ssrc, self.rtp_seq)
        self.rtp_seq = (self.rtp_seq + len(pkts)) & 0xFFFF
        link = self.media.fwd
        kind, idx = frame.kind, frame.index

        def send(k):
            p = pkts[k]
            link.send(p, UDP_FRAMING + p.wire_size, kind=kind, frame=idx)

        _pace(self.loop, len(pkts), self.config.pacing_window_us, send)

    def _player_on_media(self, pkt: RtpPacket):
        if not self.player_sig.connected:
            return
        self.player.push(pkt)

    def _player_on_frame(self, frame: MediaFrame):
        at = self.jb.push(frame, self.loop.now)
        if at is not None:
            self.loop.schedule(at, self._release)

    def _release(self):
        for frame, late in self.jb.release(self.loop.now):
            self.render(frame, late)

    def finish(self):
        self.player.drain()

    def stats(self):
        return {"jitter_buffer_dropped": self.jb.dropped, "signaling_exchanges": self.pub_sig.exchanges_done}


# -------------------------------------------------------------------- RoQ


class RoqSession(_Session):
    kind = ProtocolKind.ROQ
    ingress_link = "pub-player"

    def setup(self):
        cfg = self.config
        self.media = self.path("pub-player", cfg.net)
        rtt = _expected_rtt(cfg.net)
        self.pub = Connection(self.loop, self.media.fwd, role="client", mtu=self.mtu,
                              expected_rtt_us=rtt, name="publisher")
        self.srv = Connection(self.loop, self.media.rev, role="server", mtu=self.mtu,
                              expected_rtt_us=rtt, name="player")
        self.media.fwd.deliver = self.srv.receive
        self.media.rev.deliver = self.pub.receive
        flow_id = self.rng.below(64)
        self.flow = RoqFlow(self.pub, flow_id, cfg.roq_mode)
        self.rx_flow = RoqFlow(self.srv, flow_id, cfg.roq_mode)
        self.player = _RtpPlayer(self, self.render)
        self.ssrc = self.rng.below(1 << 32)
        self.rtp_seq = self.rng.below(1 << 16)
        self.pub.on_established = self._on_established
        self.pub.on_error = lambda c, exc: self.fail(str(exc))
        self.srv.on_datagram = self._on_datagram
        self.srv.on_stream_data = lambda c, sid, data: self._on_rtp_batch(self.rx_flow.feed_stream(data))
        self.event("player start")
        self.pub.connect()

    def _on_established(self, conn):
        self.event("connected")
        self.flow.open()
        epoch = self.loop.now + self.config.encoder_start_us
        self.loop.schedule(epoch, self.start_encoder, epoch, self._on_frame)

    def _on_frame(self, frame: MediaFrame):
        pkts = packetize_rtp(frame, self.flow.rtp_mtu, self.ssrc, self.rtp_seq)
        self.rtp_seq = (self.rtp_seq + len(pkts)) & 0xFFFF
        kind, idx = frame.kind, frame.index
        _pace(self.loop, len(pkts), self.config.pacing_window_us,
              lambda k: self.flow.send(pkts[k], kind, idx))

    def _on_datagram(self, conn, flow_id: int, data):
        if flow_id != self.rx_flow.flow_id:
            return
        self.player.push(data if isinstance(data, RtpPacket) else RtpPacket.from_bytes(data))

    def _on_rtp_batch(self, pkts):
        for p in pkts:
            self.player.push(p)

    def finish(self):
        self.player.drain()

    def stats(self):
        return {"retransmissions": self.pub.retransmissions, "srtt_us": self.pub.srtt_us}


# -------------------------------------------------------------------- MoQ


class MoqSession(_Session):
    kind = ProtocolKind.MOQ
    ingress_link = "relay-player"

    def __init__(self, config: RunConfig, track: str = TRACK_NAME):
        super().__init__(config)
        self.track = track
        self.player_start = round(config.moq_warmup_ms * 1000)
        self.media_end = self.player_start + config.duration_us

    def setup(self):
        cfg = self.config
        if cfg.relay_placement == "mid-path":
            up, down = cfg.net.split(0.5), cfg.net.split(0.5)
        else:
            up, down = NetProfile(0, name="local"), cfg.net
        self.up = self.path("pub-relay", up)
        self.down = self.path("relay-player", down)
        W = cfg.pacing_window_us
        self.relay = RelayState(self.loop, pacing_us=W, fmp4_overhead=cfg.fmp4_overhead)
        self.pub = Connection(self.loop, self.up.fwd, role="client", mtu=self.mtu,
                              expected_rtt_us=_expected_rtt(up), name="publisher")
        relay_up = Connection(self.loop, self.up.rev, role="server", mtu=self.mtu,
                              expected_rtt_us=_expected_rtt(up), name="relay-up")
        self.up.fwd.deliver = relay_up.receive
        self.up.rev.deliver = self.pub.receive
        self.relay.attach_publisher(relay_up)
        # the player dials the relay, so its client link is relay-player/rev
        self.player = Connection(self.loop, self.down.rev, role="client", mtu=self.mtu,
                                 expected_rtt_us=_expected_rtt(down), name="player")
        relay_down = Connection(self.loop, self.down.fwd, role="server", mtu=self.mtu,
                                expected_rtt_us=_expected_rtt(down), name="relay-down")
        self.down.rev.deliver = relay_down.receive
        self.down.fwd.deliver = self.player.receive
        self.relay.attach_subscriber(relay_down)
        self._group_stream: dict[int, int] = {}
        self._parsers: dict[int, MoqObjectParser] = {}
        self._ctrl_sid: int | None = None
        self._ctrl_buf = bytearray()
        self.subscribed = False
        self.subscribe_error: SubscribeError | None = None
        self.pub.on_established = self._pub_established
        self.pub.on_error = lambda c, exc: self.fail(f"relay unreachable: {exc}")
        self.player.on_established = self._player_established
        self.player.on_error = lambda c, exc: self.fail(str(exc))
        self.player.on_stream_data = self._player_data
        self.event("publisher start")
        self.pub.connect()
        self.loop.schedule(self.player_start, self._player_start)

    # publisher
    def _pub_established(self, conn):
        self.event("publisher connected")
        self.start_encoder(self.loop.now, self._pub_frame, media_end=self.media_end)

    def _pub_frame(self, frame: MediaFrame):
        obj = fragment_moq(frame, self.config.fmp4_overhead, self.profile.gop_size)
        sid = self._group_stream.get(obj.group_id)
        if sid is None:
            sid = self._group_stream[obj.group_id] = self.pub.open_stream()
        self.pub.stream_send(sid, obj.to_bytes(), kind=frame.kind, frame=frame.index,
                             spread_us=self.config.pacing_window_us)

    # player
    def _player_start(self):
        self.event("player start")
        self.player.connect()

    def _player_established(self, conn):
        self.event("player connected")
        self._ctrl_sid = conn.open_stream()
        body = bytes([FILTER_CODES[self.config.subscribe_filter]]) + self.track.encode()
        conn.stream_send(self._ctrl_sid, encode_control(CTRL_SUBSCRIBE, 1, body), kind="ctrl")

    def _player_data(self, conn, sid: int, data: bytes):
        if sid == self._ctrl_sid:
            self._ctrl_buf += data
            for kind, rid, body in decode_controls(self._ctrl_buf):
                if kind == CTRL_SUBSCRIBE_OK:
                    self.subscribed = True
                    self.event("subscribed")
                elif kind == CTRL_SUBSCRIBE_ERROR:
                    self.subscribe_error = SubscribeError(f"unknown track {self.track!r}")
                    self.fail(str(self.subscribe_error))
            return
        parser = self._parsers.get(sid)
        if parser is None:
            parser = self._parsers[sid] = MoqObjectParser(self.config.fmp4_overhead)
        for obj in parser.feed(data):
            self.render(defragment_moq(obj))

    def stats(self):
        return {
            "relay_objects": self.relay.received,
            "retransmissions": self.pub.retransmissions + sum(
                c.retransmissions for c in self.relay.subscriber_conns),
        }


_DRIVERS = {
    ProtocolKind.WEBRTC_LIKE: WebRtcLikeSession,
    ProtocolKind.ROQ: RoqSession,
    ProtocolKind.MOQ: MoqSession,
}


def webrtc_like_start(config: RunConfig) -> SessionTrace:
    return WebRtcLikeSession(config.with_(protocol=ProtocolKind.WEBRTC_LIKE)).run()


def roq_start(config: RunConfig) -> SessionTrace:
    return RoqSession(config.with_(protocol=ProtocolKind.ROQ)).run()


def moq_subscribe(config: RunConfig, track: str = TRACK_NAME) -> SessionTrace:
    """Run a MoQ session; raises SubscribeError when the relay rejects the track."""
    s = MoqSession(config.with_(protocol=ProtocolKind.MOQ), track=track)
    trace = s.run()
    if s.subscribe_error is not None:
        raise s.subscribe_error
    return trace


def run_session(config: RunConfig) -> SessionTrace:
    """Run one emulated session; failures are recorded on the trace."""
    return _DRIVERS[config.protocol](config).run()


__all__ = [
    "ConnectError",
    "JitterBuffer",
    "RelayState",
    "RoqFlow",
    "SessionTrace",
    "SignalingSession",
    "SubscribeError",
    "jitter_buffer_release",
    "run_session",
]
