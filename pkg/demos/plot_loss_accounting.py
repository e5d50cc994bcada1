"""
Wire loss versus frame loss
===========================

Byte loss is measured on the wire, so it counts every dropped packet,
including retransmitted ones.  Frame loss is what the player sees.  RTP over
QUIC datagrams loses both; over a reliable stream the wire keeps losing
bytes but every frame still arrives, only later.
"""

from streamlab.core import ENCODING_PRESETS, ProtocolKind, RunConfig
from streamlab.metrics import build_report
from streamlab.netem import NetProfile
from streamlab.protocols import run_session

for loss in (0.0, 0.02, 0.1):
    net = NetProfile(10_000, loss_rate=loss, name=f"loss-{loss}")
    cfg = RunConfig(ProtocolKind.ROQ, ENCODING_PRESETS["480p"], net, duration_s=6, seed=3)
    for mode in ("datagram", "stream"):
        trace = run_session(cfg.with_(roq_mode=mode))
        r = build_report(trace)
        print(f"p={loss:<5} {mode:<9} byte loss {r.byte_loss_pct:6.2f}%  "
              f"frames lost {r.frames_lost:3d}/{r.frames_generated}  "
              f"late {r.late_frames:3d}  latency {r.latency_mean_ms:7.1f} ms")

# retransmissions show up as extra wire traffic rather than as missing frames
