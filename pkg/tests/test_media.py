import random
from itertools import combinations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamlab.core import ENCODING_PRESETS, ConfigError, EncodingProfile
from streamlab.media import (
    ClockViolation,
    FrameLoss,
    MediaFrame,
    MoqObjectParser,
    RenderSink,
    RtpPacket,
    defragment_moq,
    depacketize_rtp,
    fragment_moq,
    frame_size,
    gop_budget,
    generate_frame,
    packetize_rtp,
    unpack_frame_header,
)


def test_frame_sizes_1080p():
    p = ENCODING_PRESETS["1080p"]
    assert gop_budget(p) == 312_500
    assert frame_size(p, 1) == 39_062
    # the remainder of the integer split goes to the I frame
    assert frame_size(p, 0) == 312_500 - 4 * 39_062 == 156_252
    assert sum(frame_size(p, i) for i in range(5)) == 312_500


def test_frame_sizes_480p():
    p = ENCODING_PRESETS["480p"]
    assert gop_budget(p) == 104_166
    assert frame_size(p, 1) == 13_020
    assert frame_size(p, 0) == 52_086


def test_ratio_one_gives_equal_frames():
    p = EncodingProfile(1280, 720, 10_000, i_to_p_size_ratio=1.0)
    sizes = {frame_size(p, i) for i in range(1, 5)}
    assert sizes == {gop_budget(p) // 5}
    assert frame_size(p, 0) - gop_budget(p) // 5 < 5


def test_tiny_budget_rejected():
    p = EncodingProfile(16, 16, 1, fps=60)
    with pytest.raises(ConfigError):
        frame_size(p, 0)


@pytest.mark.parametrize("name", ["1080p", "720p", "480p"])
def test_bitrate_conservation(name):
    p = ENCODING_PRESETS[name]
    for start in (0, 7, 13):
        total = sum(frame_size(p, i) for i in range(start, start + p.fps))
        assert abs(total - p.bitrate_kbps * 125) < frame_size(p, 0)


def test_frame_kinds_and_header():
    p = ENCODING_PRESETS["480p"]
    assert generate_frame(p, 0).kind == "I"
    f = generate_frame(p, 7)
    assert f.kind == "P"
    assert divmod(f.index, p.gop_size) == (1, 2)
    assert generate_frame(p, 30).capture_ts == 1_000_000
    assert unpack_frame_header(f.payload) == (7, f.capture_ts, "P")
    assert unpack_frame_header(generate_frame(p, 10).payload)[2] == "I"
    assert f.payload_len == frame_size(p, 7)


def test_packetize_example():
    f = generate_frame(ENCODING_PRESETS["1080p"], 1)
    assert f.payload_len == 39_062
    pkts = packetize_rtp(f, 1200, ssrc=1, seq_start=0)
    assert len(pkts) == 33
    # 32 full fragments of 1188 B leave 1046 B for the last one
    assert len(pkts[-1].payload) == 39_062 - 32 * 1188 == 1046
    assert [p.marker for p in pkts] == [False] * 32 + [True]
    assert len({p.timestamp for p in pkts}) == 1
    assert all(p.wire_size <= 1200 for p in pkts)
    assert sum(p.wire_size for p in pkts) == 39_062 + 12 * 33


def test_small_frame_single_packet():
    f = MediaFrame(3, "P", 100_000, bytes(range(16)) + b"x" * 50)
    (pkt,) = packetize_rtp(f, 1200, 9, 0)
    assert pkt.marker


def test_packetize_errors():
    f = generate_frame(ENCODING_PRESETS["480p"], 1)
    with pytest.raises(ValueError):
        packetize_rtp(f, 13, 1, 0)
    with pytest.raises(ValueError):
        packetize_rtp(MediaFrame(0, "I", 0, b""), 1200, 1, 0)


def test_seq_wraps():
    f = generate_frame(ENCODING_PRESETS["1080p"], 0)
    pkts = packetize_rtp(f, 1200, 1, 65_530)
    assert pkts[0].seq == 65_530 and pkts[6].seq == 0
    assert depacketize_rtp(pkts) == [f]


def test_rtp_bytes_round_trip():
    pkt = RtpPacket(0xDEADBEEF, 65535, 123456, True, b"hello")
    raw = pkt.to_bytes()
    assert len(raw) == pkt.wire_size == 17
    assert raw[0] >> 6 == 2
    assert RtpPacket.from_bytes(raw) == pkt
    with pytest.raises(ValueError):
        RtpPacket.from_bytes(b"\x00" * 12)


def test_shuffled_fragments():
    f = generate_frame(ENCODING_PRESETS["1080p"], 1)
    pkts = packetize_rtp(f, 1200, 5, 100)
    random.Random(3).shuffle(pkts)
    assert depacketize_rtp(pkts) == [f]


def test_missing_middle_fragment():
    f = generate_frame(ENCODING_PRESETS["1080p"], 1)
    pkts = packetize_rtp(f, 1200, 5, 100)
    del pkts[10]
    (loss,) = depacketize_rtp(pkts)
    assert isinstance(loss, FrameLoss)
    assert loss.missing == 1 and loss.index == 1


def test_interleavings_of_two_frames():
    p = EncodingProfile(320, 240, 300, gop_size=2)
    a, b = generate_frame(p, 0), generate_frame(p, 1)
    pa = packetize_rtp(a, 300, 1, 0)
    pb = packetize_rtp(b, 300, 1, len(pa))
    assert len(pa) == 7 and len(pb) == 2
    # every merge of the two sequences (order within each frame shuffled too)
    rng = random.Random(0)
    n = len(pa) + len(pb)
    for slots in combinations(range(n), len(pa)):
        qa, qb = pa[:], pb[:]
        rng.shuffle(qa)
        rng.shuffle(qb)
        merged = [qa.pop() if i in slots else qb.pop() for i in range(n)]
        assert depacketize_rtp(merged) == [a, b]


@settings(max_examples=60, deadline=None)
@given(
    index=st.integers(0, 10_000),
    kbps=st.integers(200, 20_000),
    mtu=st.integers(576, 1500),
    seq=st.integers(0, 65_535),
)
def test_rtp_round_trip_property(index, kbps, mtu, seq):
    p = EncodingProfile(640, 360, kbps)
    f = generate_frame(p, index)
    pkts = packetize_rtp(f, mtu, 77, seq)
    assert sum(len(x.payload) for x in pkts) == f.payload_len
    assert [RtpPacket.from_bytes(x.to_bytes()) for x in pkts] == pkts
    assert depacketize_rtp(pkts) == [f]


def test_moq_fragment_arithmetic():
    p = ENCODING_PRESETS["480p"]
    f = generate_frame(p, 12)
    obj = fragment_moq(f, 0, p.gop_size)
    assert (obj.group_id, obj.object_id) == (2, 2)
    assert obj.wire_size == 24 + f.payload_len
    assert len(obj.to_bytes()) == obj.wire_size
    obj = fragment_moq(f, 120, p.gop_size)
    assert len(obj.to_bytes()) == 24 + 120 + f.payload_len
    assert defragment_moq(obj) == f
    with pytest.raises(ValueError):
        fragment_moq(f, -1, 5)


@settings(max_examples=40, deadline=None)
@given(index=st.integers(0, 5000), overhead=st.integers(0, 400), cut=st.integers(1, 5000))
def test_moq_parser_round_trip(index, overhead, cut):
    p = ENCODING_PRESETS["480p"]
    frames = [generate_frame(p, index + k) for k in range(3)]
    objs = [fragment_moq(f, overhead, p.gop_size) for f in frames]
    blob = b"".join(o.to_bytes() for o in objs)
    parser = MoqObjectParser(overhead)
    got = []
    for i in range(0, len(blob), cut):
        got += parser.feed(blob[i:i + cut])
    assert got == objs
    assert [defragment_moq(o) for o in got] == frames


def test_render_sink():
    sink = RenderSink()
    f = MediaFrame(0, "I", 0, b"\x80" * 16)
    s = sink.receive(f, 215_000)
    assert s.latency_us / 1000 == 215.0
    assert sink.first_render_ts == 215_000
    g = MediaFrame(1, "P", 33_333, b"\x80" * 16)
    assert sink.receive(g, 33_333).latency_us == 0
    with pytest.raises(ClockViolation):
        sink.receive(MediaFrame(2, "P", 66_666, b"\x80" * 16), 66_000)
    assert sink.rendered == {0, 1}
