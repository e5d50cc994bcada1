import math
import random

import pytest

from streamlab.core import ConfigError, RngState
from streamlab.netem import (
    CAPTURE_HEADER,
    NET_PRESETS,
    CaptureLog,
    EventLoop,
    JitterModel,
    Link,
    LinkRefused,
    NetProfile,
    Path,
    SocketLink,
    read_capture_csv,
    resolve_network,
)


def _link(profile, seed=1, **kw):
    loop = EventLoop()
    got = []
    link = Link(loop, profile, RngState(seed), name="l", deliver=lambda p: got.append((loop.now, p)), **kw)
    return loop, link, got


def test_event_order():
    loop = EventLoop()
    seen = []
    for t in (5, 3, 9):
        loop.schedule(t, seen.append, t)
    loop.run()
    assert seen == [3, 5, 9]


def test_event_ties_keep_insertion_order():
    loop = EventLoop()
    seen = []
    loop.schedule(7, seen.append, "a")
    loop.schedule(7, seen.append, "b")
    loop.run()
    assert seen == ["a", "b"]


def test_event_loop_matches_sort_oracle():
    rng = random.Random(11)
    loop = EventLoop()
    seen = []
    events = [(rng.randrange(1000), i) for i in range(100_000)]
    for t, i in events:
        loop.schedule(t, seen.append, (t, i))
    loop.run()
    assert seen == sorted(events)  # stable: ties by insertion index


def test_event_loop_rejects_past_and_empty_advance():
    loop = EventLoop()
    loop.schedule(10, lambda: None)
    loop.run()
    with pytest.raises(ValueError):
        loop.schedule(5, lambda: None)
    with pytest.raises(IndexError):
        loop.advance()


def test_run_until_stops_early():
    loop = EventLoop()
    seen = []
    loop.schedule(5, seen.append, 5)
    loop.schedule(50, seen.append, 50)
    loop.run(until=20)
    assert seen == [5] and loop.now == 20


def test_pure_delay():
    loop, link, got = _link(NetProfile(10_000))
    pkt = link.send("x", 1200)
    loop.run()
    assert pkt.recv_ts == pkt.send_ts + 10_000
    assert got == [(10_000, "x")]


def test_total_loss():
    loop, link, got = _link(NetProfile(1000, loss_rate=1.0))
    for _ in range(100):
        link.send("x", 100)
    loop.run()
    assert got == [] and link.dropped == 100
    assert all(p.dropped for p in link.capture.packets)


def test_serialization_delay():
    loop, link, _ = _link(NetProfile(0, bandwidth_kbps=12_000))
    a = link.send("a", 1200)
    b = link.send("b", 1200)
    assert a.recv_ts == 800
    assert b.recv_ts == 1600  # queued behind a


def test_bandwidth_cap_goodput():
    loop, link, _ = _link(NetProfile(2000, bandwidth_kbps=5_000))
    t = 0
    while t < 3_000_000:
        loop.schedule(t, link.send, "x", 1000)
        t += 1000  # offered 8 Mbps
    loop.run()
    rows = [p for p in link.capture.packets if p.recv_ts is not None]
    for start in range(0, 2_000_000, 250_000):
        bits = 8 * sum(p.size_bytes for p in rows if start <= p.recv_ts < start + 1_000_000)
        assert bits / 1000 <= 5_000 * 1.01


def test_mtu_refused():
    _, link, _ = _link(NetProfile(0), mtu=1200)
    with pytest.raises(LinkRefused):
        link.send("x", 1201)


def test_fifo_without_reorder():
    loop, link, got = _link(NetProfile(5000, JitterModel("uniform", 3000)))
    for i in range(2000):
        loop.schedule(i * 100, link.send, i, 500)
    loop.run()
    assert [p for _, p in got] == list(range(2000))
    recv = [p.recv_ts for p in link.capture.packets]
    assert recv == sorted(recv)
    assert all(p.recv_ts >= p.send_ts + 2000 for p in link.capture.packets)


def test_reorder_allowed():
    loop, link, got = _link(NetProfile(5000, JitterModel("uniform", 3000), reorder=True))
    for i in range(2000):
        loop.schedule(i * 100, link.send, i, 500)
    loop.run()
    assert sorted(p for _, p in got) == list(range(2000))
    assert [p for _, p in got] != list(range(2000))


def test_loss_rate_converges():
    p, n = 0.02, 100_000
    loop, link, _ = _link(NetProfile(0, loss_rate=p), seed=3)
    for _ in range(n):
        link.send(None, 100)
    assert abs(link.dropped / n - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_conservation_per_link():
    loop, link, _ = _link(NetProfile(100, loss_rate=0.1), seed=2)
    for _ in range(5000):
        link.send(None, 321)
    rows = link.capture.packets
    sent = sum(p.size_bytes for p in rows)
    delivered = sum(p.size_bytes for p in rows if p.recv_ts is not None)
    dropped = sum(p.size_bytes for p in rows if p.recv_ts is None)
    assert delivered + dropped == sent


def test_same_seed_same_trace():
    def trace(seed):
        _, link, _ = _link(NET_PRESETS["wifi-like"], seed=seed)
        for _ in range(1000):
            link.send(None, 700)
        return link.capture.to_csv()

    assert trace(4) == trace(4)
    assert trace(4) != trace(5)


def test_capture_csv_round_trip(tmp_path):
    log = CaptureLog("roq")
    loop = EventLoop()
    path = Path(loop, "a-b", NetProfile(1000, loss_rate=0.3), RngState(1), log)
    for i in range(50):
        path.fwd.send(None, 100 + i, kind="P", frame=i)
        path.rev.send(None, 40, kind="ack")
    text = log.to_csv()
    assert text.splitlines()[0] == ",".join(CAPTURE_HEADER)
    f = tmp_path / "capture.csv"
    log.write_csv(f)
    rows = read_capture_csv(f)
    assert [r.row() for r in rows] == [r.row() for r in log.rows()]
    assert [r.send_ts for r in rows] == sorted(r.send_ts for r in rows)


def test_split_profile():
    net = NetProfile(10_000, JitterModel("uniform", 3000), 0.19)
    half = net.split(0.5)
    assert half.one_way_delay_us == 5000
    assert half.jitter.amount_us == round(3000 * math.sqrt(0.5))
    assert math.isclose((1 - half.loss_rate) ** 2, 1 - net.loss_rate)


def test_profile_validation_and_resolution():
    with pytest.raises(ConfigError):
        NetProfile(-1)
    with pytest.raises(ConfigError):
        NetProfile(0, loss_rate=1.5)
    with pytest.raises(ConfigError):
        resolve_network("dialup")
    with pytest.raises(ConfigError):
        resolve_network({"delay": 5})
    inline = resolve_network({"name": "x", "one_way_delay_ms": 7, "jitter": {"kind": "normal", "amount_ms": 1}})
    assert inline.one_way_delay_us == 7000 and inline.jitter == JitterModel("normal", 1000)
    assert NetProfile.from_dict(NET_PRESETS["wifi-like"].to_dict()) == NET_PRESETS["wifi-like"]


def test_socket_link_loopback():
    link = SocketLink(NetProfile(2000), seed=1)
    try:
        for i in range(5):
            link.send(bytes([i]) * 10)
        got = [link.received.get(timeout=2) for _ in range(5)]
    finally:
        link.close()
    assert sorted(got) == [bytes([i]) * 10 for i in range(5)]
