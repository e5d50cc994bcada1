"""Minimal QUIC-semantics connections: 1-RTT handshake, reliable streams, datagrams.

Wire framing (byte counts are what the capture log records)::

    HELLO     type(1)=0x01|0x02  conn_id(8)  padding to 1200 B (or the MTU)
    STREAM    type(1)=0x08  conn_id(8)  stream_id(8)  offset(8)  length(4)  fin(1)  pad(2)  = 32 B + data
    DATAGRAM  type(1)=0x30  conn_id(4)  length(2)  flow_id(1)                        =  8 B + data
    ACK       type(1)=0x0a  conn_id(8)  stream_id(8)  cumulative(8)  frame_offset(8)
              frame_len(4)  pad(3)                                                  = 40 B

There is no congestion controller and no flow control; retransmission is
per frame on an RTO of ``max(2 * srtt, 25 ms)``, doubled for each further
retransmission of the same frame.  Every stream frame is
acknowledged immediately with the receiver's contiguous offset plus the
offset of the frame that triggered the ack.
"""

from __future__ import annotations

import struct
from typing import Callable

from streamlab.netem import EventLoop, Link, Path

STREAM_OVERHEAD = 32
DATAGRAM_OVERHEAD = 8
ACK_SIZE = 40
HELLO_SIZE = 1200
RTO_FLOOR_US = 25_000
MAX_HANDSHAKE_ATTEMPTS = 5

_HELLO = struct.Struct(">BQ")
_STREAM = struct.Struct(">BQQQIBxx")
_DATAGRAM = struct.Struct(">BIHB")
_ACK = struct.Struct(">BQQQQI3x")

T_CLIENT_HELLO = 0x01
T_SERVER_HELLO = 0x02
T_STREAM = 0x08
T_ACK = 0x0A
T_DATAGRAM = 0x30


class ConnectError(RuntimeError):
    pass


class StreamClosed(RuntimeError):
    pass


class NotEstablished(RuntimeError):
    pass


class Hello:
    __slots__ = ("server", "conn_id", "size")

    def __init__(self, server: bool, conn_id: int, size: int):
        self.server = server
        self.conn_id = conn_id
        self.size = size

    def encode(self) -> bytes:
        head = _HELLO.pack(T_SERVER_HELLO if self.server else T_CLIENT_HELLO, self.conn_id)
        return head + bytes(self.size - len(head))


class StreamFrame:
    __slots__ = ("conn_id", "stream_id", "offset", "data", "fin")

    def __init__(self, conn_id, stream_id, offset, data, fin=False):
        self.conn_id = conn_id
        self.stream_id = stream_id
        self.offset = offset
        self.data = data
        self.fin = fin

    @property
    def wire_size(self) -> int:
        return STREAM_OVERHEAD + len(self.data)

    def encode(self) -> bytes:
        return _STREAM.pack(T_STREAM, self.conn_id, self.stream_id, self.offset, len(self.data),
                            int(self.fin)) + bytes(self.data)


class DatagramFrame:
    __slots__ = ("conn_id", "flow_id", "data")

    def __init__(self, conn_id, flow_id, data):
        self.conn_id = conn_id
        self.flow_id = flow_id
        self.data = data

    @property
    def wire_size(self) -> int:
        return DATAGRAM_OVERHEAD + _data_len(self.data)

    def encode(self) -> bytes:
        if not 0 <= self.flow_id < 64:
            raise ValueError("flow_id must fit a one-byte varint (< 64)")
        raw = self.data.to_bytes() if hasattr(self.data, "to_bytes") else bytes(self.data)
        return _DATAGRAM.pack(T_DATAGRAM, self.conn_id & 0xFFFFFFFF, len(raw), self.flow_id) + raw


class AckFrame:
    __slots__ = ("conn_id", "stream_id", "cumulative", "frame_offset", "frame_len")

    def __init__(self, conn_id, stream_id, cumulative, frame_offset, frame_len):
        self.conn_id = conn_id
        self.stream_id = stream_id
        self.cumulative = cumulative
        self.frame_offset = frame_offset
        self.frame_len = frame_len

    def encode(self) -> bytes:
        return _ACK.pack(T_ACK, self.conn_id, self.stream_id, self.cumulative, self.frame_offset,
                         self.frame_len)


def _data_len(data) -> int:
    n = getattr(data, "wire_size", None)
    return len(data) if n is None else n


def decode(buf: bytes):
    """Parse one encoded frame (datagram payloads come back as raw bytes)."""
    t = buf[0]
    if t in (T_CLIENT_HELLO, T_SERVER_HELLO):
        _, cid = _HELLO.unpack_from(buf)
        return Hello(t == T_SERVER_HELLO, cid, len(buf))
    if t == T_STREAM:
        _, cid, sid, off, n, fin = _STREAM.unpack_from(buf)
        return StreamFrame(cid, sid, off, bytes(buf[STREAM_OVERHEAD:STREAM_OVERHEAD + n]), bool(fin))
    if t == T_DATAGRAM:
        _, cid, n, flow = _DATAGRAM.unpack_from(buf)
        return DatagramFrame(cid, flow, bytes(buf[DATAGRAM_OVERHEAD:DATAGRAM_OVERHEAD + n]))
    if t == T_ACK:
        _, cid, sid, cum, off, n = _ACK.unpack_from(buf)
        return AckFrame(cid, sid, cum, off, n)
    raise ValueError(f"unknown frame type {t:#x}")


class _Outstanding:
    __slots__ = ("data", "kind", "frame", "fin", "sent_ts", "retransmitted", "sent", "backoff")

    def __init__(self, data, kind, frame, fin):
        self.data = data
        self.kind = kind
        self.frame = frame
        self.fin = fin
        self.sent_ts = None
        self.retransmitted = False
        self.sent = False
        self.backoff = 0


class StreamState:
    def __init__(self, stream_id: int):
        self.stream_id = stream_id
        self.send_offset = 0
        self.outstanding: dict[int, _Outstanding] = {}
        self.recv_next = 0
        self.recv_buffer: dict[int, bytes] = {}
        self.closed = False
        self.fin_sent = False

    @property
    def acked_upto(self) -> int:
        for off in self.outstanding:
            return off
        return self.send_offset

    @property
    def retransmit_queue(self) -> list[tuple[int, int]]:
        return [(off, len(o.data)) for off, o in self.outstanding.items() if o.sent]


class Connection:
    """One endpoint of a QUIC-lite connection, driven by the event loop."""

    def __init__(self, loop: EventLoop, link: Link, *, role: str, conn_id: int = 1,
                 mtu: int = 1200, expected_rtt_us: int = 20_000,
                 handshake_timeout_us: int | None = None, name: str = ""):
        if role not in ("client", "server"):
            raise ValueError("role must be 'client' or 'server'")
        self.loop = loop
        self.link = link
        self.role = role
        self.conn_id = conn_id
        self.mtu = mtu
        self.name = name or role
        self.expected_rtt_us = max(int(expected_rtt_us), 1000)
        self.handshake_timeout_us = handshake_timeout_us or 3 * self.expected_rtt_us
        self.state = "Idle"
        self.srtt_us = 0
        self.streams: dict[int, StreamState] = {}
        self.next_stream_id = 0 if role == "client" else 1
        self.established_at: int | None = None
        self.error: Exception | None = None
        self.on_established: Callable | None = None
        self.on_stream_data: Callable | None = None
        self.on_datagram: Callable | None = None
        self.on_error: Callable | None = None
        self.retransmissions = 0
        self.handshake_packets = 0
        self.acks_sent = 0
        self.duplicates = 0
        self.datagrams_sent = 0
        self._attempt = 0
        self._hello_sent_at = 0

    # -- handshake --------------------------------------------------------
    @property
    def hello_size(self) -> int:
        return min(HELLO_SIZE, self.mtu)

    def connect(self):
        if self.role != "client":
            raise ValueError("only the client initiates")
        if self.state != "Idle":
            raise RuntimeError(f"connect() in state {self.state}")
        self.state = "HandshakeSent"
        self._send_hello()

    def _send_hello(self):
        self._hello_sent_at = self.loop.now
        self.handshake_packets += 1
        self.link.send(Hello(False, self.conn_id, self.hello_size), self.hello_size, kind="hs")
        timeout = self.handshake_timeout_us << self._attempt
        self.loop.call_later(timeout, self._handshake_timeout, self._attempt)

    def _handshake_timeout(self, attempt: int):
        if self.state != "HandshakeSent" or attempt != self._attempt:
            return
        self._attempt += 1
        if self._attempt >= MAX_HANDSHAKE_ATTEMPTS:
            self.state = "Closed"
            self._fail(ConnectError(f"{self.name}: no handshake reply after {self._attempt} attempts"))
            return
        self._send_hello()

    def _fail(self, exc: Exception):
        self.error = exc
        if self.on_error is not None:
            self.on_error(self, exc)

    def _established(self):
        self.state = "Established"
        self.established_at = self.loop.now
        if self.on_established is not None:
            self.on_established(self)

    # -- receive path -----------------------------------------------------
    def receive(self, pkt):
        if isinstance(pkt, StreamFrame):
            self._on_stream_frame(pkt)
        elif isinstance(pkt, AckFrame):
            self._on_ack(pkt)
        elif isinstance(pkt, DatagramFrame):
            if self.state == "Established" and self.on_datagram is not None:
                self.on_datagram(self, pkt.flow_id, pkt.data)
        elif isinstance(pkt, Hello):
            self._on_hello(pkt)
        else:
            raise TypeError(f"unexpected packet {pkt!r}")

    def _on_hello(self, pkt: Hello):
        if self.role == "server" and not pkt.server:
            self.handshake_packets += 1
            self.link.send(Hello(True, self.conn_id, self.hello_size), self.hello_size, kind="hs")
            if self.state == "Idle":
                self.srtt_us = self.expected_rtt_us
                self._established()
        elif self.role == "client" and pkt.server and self.state == "HandshakeSent":
            self.srtt_us = max(self.loop.now - self._hello_sent_at, 1)
            self._established()

    def _on_stream_frame(self, f: StreamFrame):
        if self.state != "Established":
            return
        st = self.streams.get(f.stream_id)
        if st is None:
            st = self.streams[f.stream_id] = StreamState(f.stream_id)
        n = len(f.data)
        if f.offset < st.recv_next or f.offset in st.recv_buffer:
            self.duplicates += 1
        else:
            st.recv_buffer[f.offset] = f.data
            buf = st.recv_buffer
            while st.recv_next in buf:
                chunk = buf.pop(st.recv_next)
                st.recv_next += len(chunk)
                if self.on_stream_data is not None:
                    self.on_stream_data(self, f.stream_id, chunk)
        self.acks_sent += 1
        self.link.send(AckFrame(self.conn_id, f.stream_id, st.recv_next, f.offset, n), ACK_SIZE,
                       kind="ack")

    def _on_ack(self, a: AckFrame):
        st = self.streams.get(a.stream_id)
        if st is None:
            return
        o = st.outstanding.pop(a.frame_offset, None)
        if o is not None and not o.retransmitted and o.sent_ts is not None:
            sample = self.loop.now - o.sent_ts
            self.srtt_us = max(1, (7 * self.srtt_us + sample) // 8)
        out = st.outstanding
        while out:
            off = next(iter(out))
            if off >= a.cumulative:
                break
            del out[off]

    # -- send path --------------------------------------------------------
    @property
    def rto_us(self) -> int:
        return max(2 * self.srtt_us, RTO_FLOOR_US)

    def open_stream(self) -> int:
        self._require_established()
        sid = self.next_stream_id
        self.next_stream_id += 4
        self.streams[sid] = StreamState(sid)
        return sid

    def close_stream(self, stream_id: int):
        self.streams[stream_id].closed = True

    def _require_established(self):
        if self.state != "Established":
            raise NotEstablished(f"{self.name}: connection is {self.state}")

    @property
    def max_stream_payload(self) -> int:
        return self.mtu - STREAM_OVERHEAD

    @property
    def max_datagram_payload(self) -> int:
        return self.mtu - DATAGRAM_OVERHEAD

    def stream_send(self, stream_id: int, data: bytes, *, kind: str = "", frame: int = -1,
                    spread_us: int = 0, fin: bool = False) -> int:
        """Queue ``data`` on a stream; frames go out evenly over ``spread_us``.

        Returns the number of stream frames used.
        """
        self._require_established()
        st = self.streams.get(stream_id)
        if st is None:
            st = self.streams[stream_id] = StreamState(stream_id)
        if st.closed:
            raise StreamClosed(f"stream {stream_id} is closed")
        step = self.max_stream_payload
        offsets = []
        for i in range(0, max(len(data), 1), step):
            chunk = data[i:i + step]
            off = st.send_offset
            st.send_offset += len(chunk)
            last = i + step >= len(data)
            st.outstanding[off] = _Outstanding(chunk, kind, frame, fin and last)
            offsets.append(off)
        n = len(offsets)
        now = self.loop.now
        for k, off in enumerate(offsets):
            if k == 0 or not spread_us:
                self._transmit(st, off)
            else:
                self.loop.schedule(now + k * spread_us // n, self._transmit, st, off)
        return n

    def _transmit(self, st: StreamState, off: int):
        o = st.outstanding.get(off)
        if o is None or self.state != "Established":
            return
        if o.sent:
            o.retransmitted = True
            o.backoff += 1
            self.retransmissions += 1
        o.sent = True
        o.sent_ts = self.loop.now
        f = StreamFrame(self.conn_id, st.stream_id, off, o.data, o.fin)
        self.link.send(f, STREAM_OVERHEAD + len(o.data), kind=o.kind, frame=o.frame)
        self.loop.call_later(self.rto_us << o.backoff, self._on_rto, st, off, o.sent_ts)

    def _on_rto(self, st: StreamState, off: int, sent_ts: int):
        o = st.outstanding.get(off)
        if o is None or o.sent_ts != sent_ts:
            return
        # the RTO may have grown since the timer was armed
        due = sent_ts + (self.rto_us << o.backoff)
        if due > self.loop.now:
            self.loop.schedule(due, self._on_rto, st, off, sent_ts)
        else:
            self._transmit(st, off)

    def datagram_send(self, data, *, flow_id: int = 0, kind: str = "", frame: int = -1):
        """Send once, never retransmitted."""
        self._require_established()
        n = _data_len(data)
        if n > self.max_datagram_payload:
            raise ValueError(f"datagram of {n} B exceeds {self.max_datagram_payload} B")
        self.datagrams_sent += 1
        return self.link.send(DatagramFrame(self.conn_id, flow_id, data), DATAGRAM_OVERHEAD + n,
                              kind=kind, frame=frame)

    def close(self):
        self.state = "Closed"


def ack_clock(conn: Connection, frame) -> AckFrame | None:
    """Ack policy: every stream frame is acked at once; datagrams never are."""
    if isinstance(frame, StreamFrame):
        st = conn.streams.get(frame.stream_id)
        cum = st.recv_next if st is not None else 0
        return AckFrame(conn.conn_id, frame.stream_id, cum, frame.offset, len(frame.data))
    return None


def connection_pair(loop: EventLoop, path: Path, *, mtu: int = 1200, conn_id: int = 1,
                    expected_rtt_us: int | None = None, handshake_timeout_us: int | None = None,
                    names=("client", "server")):
    """Client on ``path.fwd`` and server on ``path.rev``, wired to each other."""
    if expected_rtt_us is None:
        expected_rtt_us = path.fwd.profile.one_way_delay_us + path.rev.profile.one_way_delay_us
    client = Connection(loop, path.fwd, role="client", conn_id=conn_id, mtu=mtu,
                        expected_rtt_us=expected_rtt_us, handshake_timeout_us=handshake_timeout_us,
                        name=names[0])
    server = Connection(loop, path.rev, role="server", conn_id=conn_id, mtu=mtu,
                        expected_rtt_us=expected_rtt_us, name=names[1])
    path.fwd.deliver = server.receive
    path.rev.deliver = client.receive
    return client, server


def connect(client: Connection, server: Connection | None = None, t0: int | None = None):
    """Start the handshake at ``t0`` (default: now)."""
    if t0 is None or t0 == client.loop.now:
        client.connect()
    else:
        client.loop.schedule(t0, client.connect)
