"""
Where the relay sits
====================

A MoQ relay stores each object completely before it forwards it, so the
relay adds roughly one more pacing window per hop.  Moving it next to the
publisher removes the first network hop but not the store-and-forward step.
"""

from streamlab.core import ENCODING_PRESETS, ProtocolKind, RunConfig
from streamlab.metrics import build_report
from streamlab.netem import NetProfile
from streamlab.protocols import run_session

# a clean 40 ms RTT path makes the arithmetic easy to follow
net = NetProfile(20_000, name="clean-40ms")
cfg = RunConfig(ProtocolKind.MOQ, ENCODING_PRESETS["720p"], net, duration_s=5)

roq = build_report(run_session(cfg.with_(protocol=ProtocolKind.ROQ)))
print(f"RoQ direct            startup {roq.startup_ms:7.1f} ms  latency {roq.latency_mean_ms:7.1f} ms")

for placement in ("mid-path", "publisher-side"):
    for filt in ("latest_group", "next_group"):
        r = build_report(run_session(cfg.with_(relay_placement=placement, subscribe_filter=filt)))
        print(f"MoQ {placement:<14} {filt:<12} startup {r.startup_ms:7.1f} ms"
              f"  latency {r.latency_mean_ms:7.1f} ms")

# the subscriber only waits for its own handshake and SUBSCRIBE, so the
# relay's startup depends on the player-relay hop alone
