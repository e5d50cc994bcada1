import json
from pathlib import Path

import pytest

from streamlab.core import (
    ENCODING_PRESETS,
    ConfigError,
    EncodingProfile,
    ProtocolKind,
    RngState,
    RunConfig,
    derive_seed,
    next_random,
    ticks_90khz,
)
from streamlab.netem import NET_PRESETS

GOLDEN = json.loads((Path(__file__).parent / "data" / "rng_golden.json").read_text())


def test_rng_golden_sequence():
    s = RngState(GOLDEN["seed"])
    assert [next_random(s, 100) for _ in range(3)] == GOLDEN["bound_100_first3"]
    s = RngState(GOLDEN["seed"])
    assert [next_random(s, 2**32) for _ in range(8)] == GOLDEN["bound_2_32_first8"]
    assert derive_seed(1, "netem", 0) == GOLDEN["derive_seed_1_netem_0"]


def test_bound_one_is_always_zero():
    s = RngState(7)
    assert {next_random(s, 1) for _ in range(500)} == {0}


def test_same_seed_same_sequence():
    a, b = RngState(1234), RngState(1234)
    assert [next_random(a, 1000) for _ in range(10_000)] == [next_random(b, 1000) for _ in range(10_000)]


def test_bad_bound():
    with pytest.raises(ValueError):
        next_random(RngState(1), 0)


def test_substreams_are_independent():
    parent = RngState(5)
    a = parent.substream("netem")
    before = [a.below(10**6) for _ in range(5)]
    # drawing from another substream or the parent never shifts this one
    parent.substream("session").below(10)
    parent.below(10)
    again = RngState(5).substream("netem")
    assert [again.below(10**6) for _ in range(5)] == before
    assert derive_seed(5, "a") != derive_seed(5, "b")


@pytest.mark.parametrize("t,ticks", [(0, 0), (1_000_000, 90_000), (33_333, 2999)])
def test_ticks_90khz(t, ticks):
    assert ticks_90khz(t) == ticks


def test_profile_validation():
    with pytest.raises(ConfigError):
        EncodingProfile(640, 480, 1000, fps=0)
    with pytest.raises(ConfigError):
        EncodingProfile(640, 480, 1000, gop_size=0)
    with pytest.raises(ConfigError):
        EncodingProfile(640, 480, 0)
    with pytest.raises(ConfigError):
        EncodingProfile(640, 480, 1000, i_to_p_size_ratio=0.5)


def test_capture_ts():
    p = ENCODING_PRESETS["1080p"]
    assert p.capture_ts(30) == 1_000_000
    assert p.capture_ts(1) == 33_333
    assert p.capture_ts(0, epoch_us=500) == 500


def test_protocol_parse():
    assert ProtocolKind.parse("WebRTC") is ProtocolKind.WEBRTC_LIKE
    assert ProtocolKind.parse("webrtc-like") is ProtocolKind.WEBRTC_LIKE
    assert ProtocolKind.parse("MoQ") is ProtocolKind.MOQ
    with pytest.raises(ConfigError):
        ProtocolKind.parse("hls")


def _cfg(**kw):
    return RunConfig(ProtocolKind.ROQ, ENCODING_PRESETS["480p"], NET_PRESETS["lossless"], **kw)


def test_run_config_validation():
    _cfg(mtu_bytes=576)
    _cfg(mtu_bytes=1500)
    for bad in (
        dict(mtu_bytes=575),
        dict(mtu_bytes=1501),
        dict(duration_s=0),
        dict(signaling_rtts=0),
        dict(relay_placement="edge"),
        dict(roq_mode="tcp"),
        dict(subscribe_filter="all"),
    ):
        with pytest.raises(ConfigError):
            _cfg(**bad)


def test_run_config_derived_values():
    c = _cfg(jitter_buffer_ms=50, duration_s=2, pacing_frames=2)
    assert c.jitter_buffer_us == 50_000
    assert c.duration_us == 2_000_000
    assert c.pacing_window_us == 66_667
    assert c.network_seed == c.seed
    assert c.with_(netem_seed=9).network_seed == 9
    half = c.with_(encoder_efficiency=0.5).effective_profile
    assert half.bitrate_kbps == 2500
