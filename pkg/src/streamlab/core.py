"""Shared domain types, the session clock convention and seeded randomness.

All timestamps are integer microseconds on a single shared session clock
(sender and receiver stamps are directly comparable).  Milliseconds only show
up in user-facing config keys and in reports.
"""

from __future__ import annotations

import enum
import hashlib
import random
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from streamlab.netem import NetProfile

# Integer microseconds since session start.
TimeInstant = int

US_PER_S = 1_000_000


class ConfigError(ValueError):
    """Invalid run or scenario configuration."""


class ProtocolKind(str, enum.Enum):
    WEBRTC_LIKE = "webrtc"
    ROQ = "roq"
    MOQ = "moq"

    @property
    def label(self) -> str:
        return {"webrtc": "WebRTC", "roq": "RoQ", "moq": "MoQ"}[self.value]

    @classmethod
    def parse(cls, name: str) -> "ProtocolKind":
        key = name.strip().lower().replace("-", "").replace("_", "")
        aliases = {
            "webrtc": cls.WEBRTC_LIKE,
            "webrtclike": cls.WEBRTC_LIKE,
            "roq": cls.ROQ,
            "moq": cls.MOQ,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ConfigError(f"unknown protocol {name!r}") from None


@dataclass(frozen=True)
class EncodingProfile:
    width: int
    height: int
    bitrate_kbps: int
    fps: int = 30
    gop_size: int = 5
    i_to_p_size_ratio: float = 4.0
    name: str = ""

    def __post_init__(self):
        if self.fps <= 0:
            raise ConfigError("fps must be positive")
        if self.gop_size < 1:
            raise ConfigError("gop_size must be >= 1")
        if self.bitrate_kbps <= 0:
            raise ConfigError("bitrate_kbps must be positive")
        if self.i_to_p_size_ratio < 1:
            raise ConfigError("i_to_p_size_ratio must be >= 1")

    @property
    def label(self) -> str:
        return self.name or f"{self.height}p"

    @property
    def frame_interval_us(self) -> float:
        return US_PER_S / self.fps

    def capture_ts(self, index: int, epoch_us: int = 0) -> TimeInstant:
        # exact integer arithmetic: floor(index * 1e6 / fps)
        return epoch_us + index * US_PER_S // self.fps


ENCODING_PRESETS: dict[str, EncodingProfile] = {
    "1080p": EncodingProfile(1920, 1080, 15_000, name="1080p"),
    "720p": EncodingProfile(1280, 720, 10_000, name="720p"),
    "480p": EncodingProfile(854, 480, 5_000, name="480p"),
}


def derive_seed(seed: int, *labels) -> int:
    """Derive an independent 64-bit seed for a named sub-stream."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"\x00")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "big")


class RngState:
    """Single-owner seeded generator (Mersenne Twister via ``random.Random``).

    Sub-streams created with :meth:`substream` are independent of the parent
    and of each other, so adding draws in one never perturbs another.
    """

    __slots__ = ("seed", "_rng")

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._rng = random.Random(self.seed)

    def substream(self, *labels) -> "RngState":
        return RngState(derive_seed(self.seed, *labels))

    def below(self, bound: int) -> int:
        if bound <= 0:
            raise ValueError("bound must be positive")
        return self._rng.randrange(bound)

    def random(self) -> float:
        return self._rng.random()

    def uniform(self, a: float, b: float) -> float:
        return self._rng.uniform(a, b)

    def gauss(self, mu: float, sigma: float) -> float:
        return self._rng.gauss(mu, sigma)


def next_random(state: RngState, bound: int) -> int:
    """Draw an integer in ``[0, bound)``."""
    return state.below(bound)


def ticks_90khz(t: TimeInstant) -> int:
    """RTP media-clock ticks for a session timestamp."""
    return t * 90 // 1000


@dataclass(frozen=True)
class RunConfig:
    """Everything one emulated session needs."""

    protocol: ProtocolKind
    profile: EncodingProfile
    net: "NetProfile"
    duration_s: float = 2.0
    seed: int = 1
    signaling_rtts: int = 3
    jitter_buffer_ms: float = 50.0
    mtu_bytes: int = 1200
    # model knobs; defaults are the calibrated ones
    relay_placement: str = "mid-path"
    roq_mode: str = "datagram"
    fmp4_overhead: int = 120
    pacing_frames: float = 2.0
    encoder_start_ms: float = 0.0
    subscribe_filter: str = "latest_group"
    moq_warmup_ms: float = 500.0
    encoder_efficiency: float = 1.0
    drain_s: float = 1.0
    netem_seed: int | None = None
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ConfigError("duration_s must be positive")
        if not 576 <= self.mtu_bytes <= 1500:
            raise ConfigError("mtu_bytes must lie in [576, 1500]")
        if self.signaling_rtts < 1:
            raise ConfigError("signaling_rtts must be >= 1")
        if self.jitter_buffer_ms < 0:
            raise ConfigError("jitter_buffer_ms must be >= 0")
        if self.relay_placement not in ("mid-path", "publisher-side"):
            raise ConfigError(f"unknown relay_placement {self.relay_placement!r}")
        if self.roq_mode not in ("datagram", "stream"):
            raise ConfigError(f"unknown roq_mode {self.roq_mode!r}")
        if self.subscribe_filter not in ("latest_group", "next_group"):
            raise ConfigError(f"unknown subscribe_filter {self.subscribe_filter!r}")
        if self.fmp4_overhead < 0:
            raise ConfigError("fmp4_overhead must be >= 0")
        if self.pacing_frames < 0 or self.encoder_start_ms < 0:
            raise ConfigError("pacing_frames and encoder_start_ms must be >= 0")
        if not 0 < self.encoder_efficiency <= 1.5:
            raise ConfigError("encoder_efficiency must lie in (0, 1.5]")

    @property
    def duration_us(self) -> int:
        return round(self.duration_s * US_PER_S)

    @property
    def jitter_buffer_us(self) -> int:
        return round(self.jitter_buffer_ms * 1000)

    @property
    def pacing_window_us(self) -> int:
        return round(self.pacing_frames * US_PER_S / self.profile.fps)

    @property
    def encoder_start_us(self) -> int:
        return round(self.encoder_start_ms * 1000)

    @property
    def effective_profile(self) -> EncodingProfile:
        if self.encoder_efficiency == 1.0:
            return self.profile
        kbps = max(1, round(self.profile.bitrate_kbps * self.encoder_efficiency))
        return replace(self.profile, bitrate_kbps=kbps)

    @property
    def network_seed(self) -> int:
        return self.seed if self.netem_seed is None else self.netem_seed

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)
