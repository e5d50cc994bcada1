import json

import pytest

from streamlab.cli import build_parser, main
from streamlab.core import ConfigError, ProtocolKind
from streamlab.harness import (
    Expectation,
    compare,
    default_expectations,
    evaluate,
    load_scenario,
    read_report_csv,
    run_scenario,
)
from streamlab.protocols import run_session

SMOKE = {
    "name": "smoke",
    "protocols": ["webrtc", "roq", "moq"],
    "profiles": ["480p"],
    "network": "lossless",
    "duration_s": 2,
    "seed": 7,
    "repetitions": 1,
}


def test_scenario_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        load_scenario({**SMOKE, "durations": 3})
    with pytest.raises(ConfigError):
        load_scenario({**SMOKE, "overrides": {"jitter_buffer": 10}})
    with pytest.raises(ConfigError):
        load_scenario({**SMOKE, "profiles": ["4k"]})
    with pytest.raises(ConfigError):
        load_scenario({**SMOKE, "network": "satellite"})
    with pytest.raises(ConfigError):
        load_scenario({k: v for k, v in SMOKE.items() if k != "protocols"})
    with pytest.raises(ConfigError):
        load_scenario("{not json")


def test_scenario_from_file_and_inline_network(tmp_path):
    d = {**SMOKE, "network": [{"name": "lab", "one_way_delay_ms": 3}, "wifi-like"]}
    f = tmp_path / "s.json"
    f.write_text(json.dumps(d))
    sc = load_scenario(f)
    assert [n.label for n in sc.networks] == ["lab", "wifi-like"]
    assert sc.protocols == [ProtocolKind.WEBRTC_LIKE, ProtocolKind.ROQ, ProtocolKind.MOQ]


def test_smoke_scenario_generates_sixty_frames():
    sc = load_scenario(SMOKE)
    for _, _, proto, _, cfg in sc.configs():
        trace = run_session(cfg)
        in_session = [i for i, cts in trace.generated if cts >= trace.player_start_us and cts < trace.media_end_us]
        assert len(in_session) == 60, proto


def test_grid_completeness():
    sc = load_scenario({**SMOKE, "profiles": ["1080p", "720p", "480p"], "network": ["wifi-like", "5g-like"],
                        "duration_s": 1.2})
    res = run_scenario(sc)
    keys = [(r.network, r.profile, r.protocol) for r in res.reports()]
    assert len(keys) == 18 == len(set(keys))


def test_outputs_are_deterministic(tmp_path):
    sc = load_scenario({**SMOKE, "network": "wifi-like", "repetitions": 2})
    run_scenario(sc, tmp_path / "a")
    run_scenario(sc, tmp_path / "b")
    for rel in ("smoke/report.csv", "smoke/report.md", "smoke/wifi-like/moq_480p/capture.csv",
                "smoke/wifi-like/roq_480p/report.csv"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    rows = read_report_csv(tmp_path / "a" / "smoke" / "report.csv")
    assert len(rows) == 3


def test_repetitions_share_netem_seeds_across_protocols():
    sc = load_scenario({**SMOKE, "repetitions": 3})
    seeds = {}
    for _, _, proto, rep, cfg in sc.configs():
        seeds.setdefault(rep, set()).add(cfg.network_seed)
    assert all(len(s) == 1 for s in seeds.values())
    assert len({next(iter(s)) for s in seeds.values()}) == 3


def _rows(**cells):
    out = []
    for key, val in cells.items():
        proto, prof, net = key.split("__")
        out.append({"protocol": proto, "profile": prof, "network": net, "latency_mean_ms": val,
                    "startup_ms": val})
    return out


def test_expectation_ratio_falsified():
    rows = _rows(MoQ__1080p__wifi=140.0, RoQ__1080p__wifi=70.0)
    exp = Expectation("latency_mean_ms", ["MoQ/*/*", "RoQ/*/*"], "ratio_in", (0.9, 1.1))
    (r,) = evaluate([exp], rows)
    assert r.status == "fail" and r.observed == [140.0, 70.0]
    assert "2.000" in r.line()
    exp = Expectation("latency_mean_ms", ["MoQ/*/*", "RoQ/*/*"], "ratio_in", (1.7, 2.3))
    assert evaluate([exp], rows)[0].status == "pass"


def test_expectation_tie_and_missing_cells():
    rows = _rows(RoQ__1080p__lab=100.0, WebRTC__1080p__lab=100.4)
    exp = Expectation("startup_ms", ["RoQ/1080p/lab", "WebRTC/1080p/lab"], "lt", tolerance=1.0)
    assert evaluate([exp], rows)[0].status == "tie"
    exp = Expectation("startup_ms", ["RoQ/1080p/lab", "MoQ/1080p/lab"], "lt")
    with pytest.raises(ConfigError):
        evaluate([exp], rows)
    with pytest.raises(ConfigError):
        Expectation("fps", ["a/b/c", "d/e/f"], "lt")
    with pytest.raises(ConfigError):
        Expectation("startup_ms", ["a/b/c", "d/e/f"], "gt")


def test_default_expectations_load():
    exps = default_expectations()
    assert {e.relation for e in exps} == {"lt", "ratio_in"}


def test_single_signaling_rtt_reports_tie(tmp_path):
    sc = load_scenario({
        "name": "tie", "protocols": ["webrtc", "roq"], "profiles": ["1080p"], "network": "lossless",
        "duration_s": 1, "repetitions": 1, "overrides": {"signaling_rtts": 1, "jitter_buffer_ms": 0},
    })
    run_scenario(sc, tmp_path)
    ok, results = compare(tmp_path / "tie" / "report.csv", [
        {"metric": "startup_ms", "relation": "lt", "cells": ["RoQ/1080p/lossless", "WebRTC/1080p/lossless"],
         "tolerance": 1.0}])
    assert not ok and [r.status for r in results] == ["tie"]


def test_cli_run_compare_presets(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "smoke.json"
    cfg.write_text(json.dumps(SMOKE))
    monkeypatch.setenv("STREAMLAB_OUT", str(tmp_path / "env-out"))
    assert build_parser().parse_args(["run", str(cfg)]).out == str(tmp_path / "env-out")
    assert main(["run", str(cfg), "--out", str(tmp_path), "--duration-scale", "0.5", "--seed", "3"]) == 0
    report = tmp_path / "smoke" / "report.csv"
    assert report.exists()
    exp = tmp_path / "exp.json"
    exp.write_text(json.dumps([{"metric": "startup_ms", "relation": "lt",
                                "cells": ["MoQ/480p/lossless", "RoQ/480p/lossless", "WebRTC/480p/lossless"]}]))
    assert main(["compare", str(report), str(exp)]) == 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps([{"metric": "latency_mean_ms", "relation": "ratio_in", "bounds": [0.9, 1.1],
                                "cells": ["MoQ/480p/lossless", "RoQ/480p/lossless"]}]))
    assert main(["compare", str(report), str(bad)]) == 1
    assert main(["presets", "list"]) == 0
    out = capsys.readouterr().out
    assert "wifi-like" in out and "1080p" in out and "FAIL" in out
    assert main(["run", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2


def test_failed_session_leaves_marker(tmp_path):
    sc = load_scenario({**SMOKE, "protocols": ["roq"],
                        "network": {"name": "dead", "one_way_delay_ms": 5, "loss_rate": 1.0}})
    res = run_scenario(sc, tmp_path)
    assert not res.ok
    marker = tmp_path / "smoke" / "dead" / "roq_480p" / "FAILED"
    assert "handshake" in marker.read_text()
    assert (tmp_path / "smoke" / "dead" / "roq_480p" / "capture.csv").exists()
