"""
End-to-end tests of the pipeline and the command line.
"""
import json
import socket
from collections import Counter

import pytest

from ixwatch import Pipeline, PipelineConfig, REPLAY, main, parse_listen, run_replay
from settings import Settings
from stages.attacksim import AttackSpec, BaselineSpec, Scenario, encode_netflow_v9, simulate
from stages.collector import NetflowCollector
from stages.flow_ingest import FlowRecord

T0 = 1_600_041_600
VICTIM = 2354
PORT = 389


@pytest.fixture(autouse=True)
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def scenario(**attack):
    spec = dict(dst_as=VICTIM, ports=[PORT], start=10, end=20, total_bps=200e6)
    spec.update(attack)
    return Scenario(
        seed=42,
        duration_intervals=30,
        baseline=[BaselineSpec([10, 11, 12], VICTIM, 53, 2e6, jitter=0.1)],
        attacks=[AttackSpec(**spec)],
        t0=T0,
    ).validate()


def simulated(tmp_path, sc, netflow=False):
    data = tmp_path / ("flows.pcap" if netflow else "flows.jsonl")
    table = tmp_path / "prefixes.txt"
    simulate(sc, data, netflow=netflow, prefix_table_path=table)
    return data, table


def run(data, table, out, *extra, source="--replay"):
    return main(["--quiet", "run", source, str(data), "--prefix-table", str(table),
                 "--out-dir", str(out), *extra])


def read_jsonl(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def attack_key(objs):
    return [o for o in objs if o["src_port"] == PORT and o["dst_as"] == VICTIM]


def test_first_alert_in_first_attack_interval(workdir):
    """Test that a step attack on a quiet key alerts in its first interval."""
    data, table = simulated(workdir, scenario())
    assert run(data, table, workdir / "out") == 0

    alerts = attack_key(read_jsonl(workdir / "out" / "alerts.jsonl"))
    assert alerts[0]["t"] == T0 + 10 * 60
    assert [a["t"] for a in alerts] == [T0 + i * 60 for i in range(10, 20)]
    assert all(a["volume_bps"] == pytest.approx(200e6) for a in alerts)
    assert all(a["entropy"] == pytest.approx(1.0) for a in alerts)
    baseline = [a for a in read_jsonl(workdir / "out" / "anomalies.jsonl") if a["src_port"] == 53]
    assert baseline == []

    [session] = read_jsonl(workdir / "out" / "sessions.jsonl")
    assert (session["start"], session["end"]) == (T0 + 600, T0 + 1200)
    assert session["duration_minutes"] == 10.0
    assert session["n_sources"] == 40
    assert not session["truncated"]

    rules = read_jsonl(workdir / "out" / "rules.jsonl")
    assert Counter(r["state"] for r in rules) == {"active": 40, "withdrawn": 40}
    text = (workdir / "out" / "rules.txt").read_text().splitlines()
    assert text[0].startswith("discard udp src 10.3.232.0/24 sport 389 dst 10.9.50.0/24")


def test_far_future_flow_does_not_blind_run(workdir):
    """Test that one flow stamped days ahead leaves detection of the attack intact."""
    data, table = simulated(workdir, scenario())
    lines = data.read_text().splitlines()
    bogus = json.loads(lines[len(lines) // 4])
    bogus["ts"] = T0 + 3 * 86400
    lines.insert(len(lines) // 4, json.dumps(bogus))
    data.write_text("\n".join(lines) + "\n")

    assert run(data, table, workdir / "out") == 0
    alerts = attack_key(read_jsonl(workdir / "out" / "alerts.jsonl"))
    assert [a["t"] for a in alerts] == [T0 + i * 60 for i in range(10, 20)]
    [session] = read_jsonl(workdir / "out" / "sessions.jsonl")
    assert session["end"] == T0 + 1200


@pytest.mark.parametrize("attack, alerts, gate", [
    (dict(n_sources=3, share="zipf", zipf_s=4.0), 0, "entropy"),
    (dict(total_bps=4e6), 0, "volume"),
    (dict(), 10, None),
])
def test_gate_separation(workdir, attack, alerts, gate):
    """Test that each scenario produces only its own kind of event on the attacked key."""
    data, table = simulated(workdir, scenario(**attack))
    assert run(data, table, workdir / "out") == 0
    got_alerts = attack_key(read_jsonl(workdir / "out" / "alerts.jsonl"))
    got_logs = attack_key(read_jsonl(workdir / "out" / "anomalies.jsonl"))
    assert len(got_alerts) == alerts
    if gate is None:
        assert got_logs == []
    else:
        assert len(got_logs) == 10
        assert {log["failed_gate"] for log in got_logs} == {gate}
        assert read_jsonl(workdir / "out" / "sessions.jsonl") == []


def test_empty_replay(workdir):
    """Test that an empty replay succeeds with empty outputs."""
    (workdir / "empty.jsonl").write_text("")
    (workdir / "prefixes.txt").write_text("10.0.0.0/8 100\n")
    assert run(workdir / "empty.jsonl", workdir / "prefixes.txt", workdir / "out") == 0
    for name in ("alerts.jsonl", "anomalies.jsonl", "sessions.jsonl", "rules.jsonl"):
        assert (workdir / "out" / name).read_text() == ""


def test_missing_prefix_table(workdir):
    """Test that a missing prefix table fails before anything is written."""
    (workdir / "flows.jsonl").write_text("")
    assert run(workdir / "flows.jsonl", workdir / "nope.txt", workdir / "out") == 1
    assert not (workdir / "out").exists()


def test_missing_replay(workdir):
    """Test that a missing input is reported as a configuration error."""
    (workdir / "prefixes.txt").write_text("10.0.0.0/8 100\n")
    assert run(workdir / "missing.jsonl", workdir / "prefixes.txt", workdir / "out") == 1


def test_replay_is_deterministic(workdir):
    """Test that two runs over the same input write byte-identical outputs."""
    data, table = simulated(workdir, scenario(ports=[123, 389], jitter=0.2))
    for out in ("a", "b"):
        assert run(data, table, workdir / out, "--archive-sketches") == 0
    for name in ("alerts.jsonl", "anomalies.jsonl", "sessions.jsonl", "rules.jsonl",
                 "rules.txt", "rules.exabgp", "sketches.jsonl"):
        assert (workdir / "a" / name).read_bytes() == (workdir / "b" / name).read_bytes()
    sessions = read_jsonl(workdir / "a" / "sessions.jsonl")
    assert len(sessions) == 2
    assert sessions[0]["multi_vector_group"] == sessions[1]["multi_vector_group"] is not None


def test_pcap_matches_replay(workdir):
    """Test that NetFlow capture input gives the same alerts as the replay."""
    sc = scenario()
    replay, table = simulated(workdir, sc)
    pcap, _ = simulated(workdir, sc, netflow=True)
    assert run(replay, table, workdir / "r") == 0
    assert run(pcap, table, workdir / "p", source="--pcap") == 0
    for name in ("alerts.jsonl", "sessions.jsonl"):
        assert (workdir / "r" / name).read_bytes() == (workdir / "p" / name).read_bytes()


def test_gen_rules_matches_run(workdir):
    """Test that regenerating rules from the logs reproduces the run's rule log."""
    data, table = simulated(workdir, scenario())
    run(data, table, workdir / "out")
    assert main(["--quiet", "gen-rules", "--alerts", str(workdir / "out" / "alerts.jsonl"),
                 "--sessions", str(workdir / "out" / "sessions.jsonl"),
                 "--prefix-table", str(table), "--out-dir", str(workdir / "rules")]) == 0
    assert (workdir / "rules" / "rules.jsonl").read_bytes() == (workdir / "out" / "rules.jsonl").read_bytes()


def test_gen_rules_top_n(workdir):
    """Test that --top-n limits the rules per alert."""
    data, table = simulated(workdir, scenario())
    run(data, table, workdir / "out")
    main(["--quiet", "gen-rules", "--alerts", str(workdir / "out" / "alerts.jsonl"),
          "--prefix-table", str(table), "--top-n", "5", "--out-dir", str(workdir / "rules")])
    assert len(read_jsonl(workdir / "rules" / "rules.jsonl")) == 5


def test_report_stats(workdir):
    """Test that report stats writes its CSV tables."""
    data, table = simulated(workdir, scenario())
    run(data, table, workdir / "out")
    assert main(["--quiet", "report", "stats", "--sessions", str(workdir / "out" / "sessions.jsonl"),
                 "--out-dir", str(workdir / "stats")]) == 0
    assert (workdir / "stats" / "sessions.csv").read_text().startswith("session_id,dst_as,port")


def test_report_matrix(workdir, capsys):
    """Test the matrix command on an archived run."""
    data, table = simulated(workdir, scenario())
    run(data, table, workdir / "out", "--archive-sketches")
    assert main(["--quiet", "report", "matrix", "--sketches", str(workdir / "out" / "sketches.jsonl"),
                 "--sessions", str(workdir / "out" / "sessions.jsonl"), "--dst-as", str(VICTIM),
                 "--port", str(PORT), "--from", "2020-09-14", "--to", "2020-09-14"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "src_as,2020-09-14"
    assert lines[1] == "1000,0.0"
    assert main(["--quiet", "report", "matrix", "--sketches", str(workdir / "out" / "sketches.jsonl"),
                 "--dst-as", str(VICTIM), "--port", str(PORT),
                 "--from", "2020-09-14", "--to", "2020-09-16"]) == 2


def test_analyze_mitigation(workdir):
    """Test the mitigation command on a blackholed victim."""
    data, table = simulated(workdir, scenario())
    run(data, table, workdir / "out")
    updates = workdir / "updates.jsonl"
    updates.write_text("\n".join(json.dumps(u) for u in [
        {"ts": T0 - 3600, "kind": "announce", "prefix": "10.9.50.0/24", "origin_as": VICTIM},
        {"ts": T0 + 900, "kind": "announce", "prefix": "10.9.50.0/24", "origin_as": VICTIM,
         "next_hop": "192.0.2.1", "communities": ["64512:666"]},
    ]) + "\n")
    out = workdir / "mitigation.jsonl"
    assert main(["--quiet", "analyze-mitigation", "--updates", str(updates),
                 "--sessions", str(workdir / "out" / "sessions.jsonl"),
                 "--prefix-table", str(table), "--out", str(out)]) == 0
    [report] = read_jsonl(out)
    assert report["mitigated"]
    assert report["kinds"] == ["blackhole_community", "blackhole_nexthop"]
    assert report["delay_minutes"] == 5.0


def test_settings_command_saves(workdir, capsys):
    """Test that settings overrides are printed and saved."""
    assert main(["--quiet", "settings", "--alpha", "0.8", "--save", "saved.json"]) == 0
    assert "alpha = 0.8" in capsys.readouterr().out
    saved = Settings("saved.json")
    assert saved.detector["alpha"] == 0.8
    assert saved.pipeline["out_dir"] == "ixwatch-out"


def test_settings_file_used_by_default(workdir):
    """Test that ixwatch_settings.json in the working directory is picked up."""
    (workdir / "ixwatch_settings.json").write_text(json.dumps({"detector": {"theta": 4.0}}))
    assert Settings().detector["theta"] == 4.0
    assert Settings().detector["tau"] == 0.5


def test_settings_unknown_key(workdir):
    """Test that an unknown key in a settings file exits with a configuration error."""
    (workdir / "bad.json").write_text(json.dumps({"detector": {"gamma": 1}}))
    assert main(["--quiet", "--settings", "bad.json", "settings"]) == 1


def test_settings_missing_explicit_file(workdir):
    """Test that a named settings file must exist."""
    assert main(["--quiet", "--settings", "nope.json", "settings"]) == 1


def test_invalid_detector_flag(workdir):
    """Test that an out-of-range flag is a configuration error."""
    data, table = simulated(workdir, scenario())
    assert run(data, table, workdir / "out", "--tau", "1.5") == 1


def test_parse_listen():
    """Test host:port parsing."""
    assert parse_listen("127.0.0.1:9995") == ("127.0.0.1", 9995)
    assert parse_listen(":2055") == ("0.0.0.0", 2055)


def test_prefix_table_swap_and_requests(workdir):
    """Test the reload and counter-dump requests serviced between records."""
    (workdir / "prefixes.txt").write_text("10.0.0.0/8 100\n")
    (workdir / "flows.jsonl").write_text("")
    config = PipelineConfig(source=REPLAY, input_path="flows.jsonl", prefix_table="prefixes.txt",
                            out_dir=str(workdir / "out"))
    pipeline = Pipeline(config)
    (workdir / "prefixes.txt").write_text("10.0.0.0/8 555\n")
    pipeline.reload_requested = True
    pipeline.dump_requested = True
    pipeline.service_requests()
    assert not pipeline.reload_requested and not pipeline.dump_requested
    assert pipeline.mapper.table.lookup("10.1.1.1") == 555

    (workdir / "prefixes.txt").write_text("# empty now\n")
    assert not pipeline.swap_prefix_table()
    assert pipeline.mapper.table.lookup("10.1.1.1") == 555

    run_replay(pipeline, "flows.jsonl")
    pipeline.flush()
    pipeline.close()
    assert set(pipeline.counters()) == {"ingest", "mapper", "aggregation", "detection", "flowspec"}


def test_stop_request_ends_replay(workdir):
    """Test that a stop request ends the replay loop early."""
    sc = scenario()
    data, table = simulated(workdir, sc)
    config = PipelineConfig(source=REPLAY, input_path=str(data), prefix_table=str(table),
                            out_dir=str(workdir / "out"))
    pipeline = Pipeline(config)
    pipeline.stop()
    run_replay(pipeline, data)
    pipeline.close()
    assert pipeline.ingest_counters["flows_parsed"] == 1


def netflow_datagram():
    record = FlowRecord(T0, "10.0.0.1", 123, "10.1.0.1", 4000, 17, 10, 4500)
    return record, encode_netflow_v9([record])[0]


def test_collector_handles_garbage():
    """Test that the collector queues good records and counts bad datagrams."""
    record, datagram = netflow_datagram()
    collector = NetflowCollector("127.0.0.1", 0)
    collector.handle_datagram(b"\xff" * 30, "192.0.2.1")
    collector.handle_datagram(datagram, "192.0.2.1")
    assert collector.records.get_nowait() == record
    counters = collector.counters()
    assert counters["parse_errors"] == 1
    assert counters["exporters"] == 1


def test_collector_receives_udp():
    """Test a datagram sent over a real UDP socket."""
    record, datagram = netflow_datagram()
    collector = NetflowCollector("127.0.0.1", 0)
    collector.bind()
    collector.start()
    assert collector.ready.wait(5.0)
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sender:
        sender.sendto(datagram, ("127.0.0.1", collector.port))
    try:
        assert collector.records.get(timeout=5.0) == record
    finally:
        collector.stop()
        collector.join(timeout=5.0)
    assert not collector.is_alive()
