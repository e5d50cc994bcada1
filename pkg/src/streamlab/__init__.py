"""Desk-scale lab comparing WebRTC-like RTP, RTP-over-QUIC and Media-over-QUIC
streaming over an emulated network."""

from streamlab.core import (
    EncodingProfile,
    ProtocolKind,
    RngState,
    RunConfig,
    ENCODING_PRESETS,
    next_random,
    ticks_90khz,
)
from streamlab.netem import NetProfile, JitterModel, NET_PRESETS
from streamlab.protocols import run_session
from streamlab.metrics import SessionReport, build_report

__version__ = "0.1.0"

__all__ = [
    "EncodingProfile",
    "ProtocolKind",
    "RngState",
    "RunConfig",
    "ENCODING_PRESETS",
    "next_random",
    "ticks_90khz",
    "NetProfile",
    "JitterModel",
    "NET_PRESETS",
    "run_session",
    "SessionReport",
    "build_report",
]
