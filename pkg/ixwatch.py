#!/usr/bin/env python3
"""ixwatch: streaming DRDoS detection over IXP flow telemetry.

Subcommands:
    run                 replay, pcap or live NetFlow -> sketches -> alerts, sessions, rules
    simulate            synthetic scenario -> replay JSONL or NetFlow pcap
    analyze-mitigation  BGP update log + sessions -> blackholing / re-routing findings
    gen-rules           alert (+ session) log -> filter rules
    report              stats | matrix | timeline over session logs and sketch archives
    settings            show or save the effective settings
"""
import argparse
import datetime as dt
import json
import os
import queue
import signal
import sys
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import structlog

from errors import ConfigError, InputError, IxwatchError
from logsetup import configure_logging
from settings import Settings
from stages.aggregation import MonitoredPortTable, SketchStore, load_monitored_ports
from stages.asn_map import FlowMapper, load_prefix_table_file
from stages.attacksim import load_scenario, simulate
from stages.collector import NetflowCollector
from stages.detection import AnomalyLog, DetectorConfig, DrdosAlert, DrdosDetector, SessionFinalized
from stages.flow_ingest import NetflowV9Parser, SamplingConfig, read_pcap, read_replay
from stages.flowspec_gen import (
    FilterRule, RuleGenerator, SkippedRule, render_exabgp, render_text, replay_rule_log,
)
from stages.mitigation_bgp import analyze_mitigation, load_baseline_file, load_updates
from stages import reporting

logger = structlog.get_logger("ixwatch")

REPLAY = "replay"
PCAP = "pcap"
LIVE = "live"


@dataclass
class PipelineConfig:
    source: str
    prefix_table: str
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    input_path: Optional[str] = None
    listen: tuple = ("0.0.0.0", 2055)
    monitored_ports: Optional[str] = None
    out_dir: str = "ixwatch-out"
    top_n: Optional[int] = None
    archive_sketches: bool = False
    sampling_rate: int = 1
    late_grace_intervals: int = 1
    max_future_intervals: int = 60
    idle_intervals: int = 1440

    def validate(self):
        """Fail fast on anything that would otherwise fail mid-stream."""
        if not self.prefix_table:
            raise ConfigError("a prefix table is required (--prefix-table)")
        paths = [("prefix table", self.prefix_table)]
        if self.monitored_ports:
            paths.append(("monitored ports", self.monitored_ports))
        if self.source in (REPLAY, PCAP):
            paths.append((f"{self.source} input", self.input_path))
        for what, path in paths:
            if not path or not os.path.isfile(path):
                raise ConfigError(f"{what} not found: {path}")
        if self.top_n is not None and self.top_n < 1:
            raise ConfigError(f"top_n must be >= 1, got {self.top_n}")
        if self.late_grace_intervals < 0:
            raise ConfigError("late_grace_intervals must be >= 0")
        if self.max_future_intervals < 0 or self.idle_intervals < 0:
            raise ConfigError("max_future_intervals and idle_intervals must be >= 0")
        try:
            SamplingConfig(self.sampling_rate)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        self.detector.validate()
        return self


class Pipeline:
    """Mapper -> sketch store -> detector -> rule generator, with file sinks.

    Every stage output is written to its sink and handed to the next stage.
    """

    def __init__(self, config):
        self.config = config.validate()
        table = load_prefix_table_file(config.prefix_table)
        ports = load_monitored_ports(config.monitored_ports) if config.monitored_ports else MonitoredPortTable()

        self.out_dir = Path(config.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.sinks = {
            "alerts": self._open("alerts.jsonl"),
            "anomalies": self._open("anomalies.jsonl"),
            "sessions": self._open("sessions.jsonl"),
            "rules": self._open("rules.jsonl"),
            "rules_text": self._open("rules.txt"),
            "rules_exabgp": self._open("rules.exabgp"),
        }
        archive = self._open("sketches.jsonl") if config.archive_sketches else None
        if archive is not None:
            self.sinks["sketches"] = archive

        self.mapper = FlowMapper(table, SamplingConfig(config.sampling_rate))
        self.store = SketchStore(ports, config.detector.delta_t, config.late_grace_intervals, archive,
                                 config.max_future_intervals, config.idle_intervals,
                                 wall_clock=config.source == LIVE)
        self.detector = DrdosDetector(config.detector, on_evict=self.store.forget)
        self.rules = RuleGenerator(table, config.top_n)
        self.stages = [self.mapper, self.store, self.detector, self.rules]

        self.ingest_counters = {}
        self.running = True
        self.dump_requested = False
        self.reload_requested = False

    def _open(self, name):
        return open(self.out_dir / name, "w", encoding="utf-8")

    def _run_from(self, index, items):
        for item in items:
            self._write(item)
            if index < len(self.stages):
                self._run_from(index + 1, self.stages[index].process(item))

    def feed(self, record):
        """Push one FlowRecord through every stage."""
        self._run_from(0, [record])

    def advance_to(self, timestamp):
        """Close the intervals the wall clock has moved past (live mode)."""
        self._run_from(2, self.store.advance_to(timestamp))

    def flush(self):
        """Flush the stages in order; open sessions end truncated."""
        for index, stage in enumerate(self.stages):
            self._run_from(index + 1, stage.flush())

    def _line(self, sink, obj):
        self.sinks[sink].write(json.dumps(obj, sort_keys=True) + "\n")

    def _write(self, item):
        if isinstance(item, DrdosAlert):
            self._line("alerts", item.to_dict())
        elif isinstance(item, AnomalyLog):
            self._line("anomalies", item.to_dict())
        elif isinstance(item, SessionFinalized):
            self._line("sessions", item.session.to_dict())
        elif isinstance(item, FilterRule):
            self._line("rules", item.to_dict())
            self.sinks["rules_text"].write(render_text(item) + "\n")
            self.sinks["rules_exabgp"].write(render_exabgp(item) + "\n")
        elif isinstance(item, SkippedRule):
            self._line("rules", item.to_dict())

    def swap_prefix_table(self):
        """Reload the prefix table from disk; keep the old one if that fails."""
        try:
            table = load_prefix_table_file(self.config.prefix_table)
        except IxwatchError as e:
            logger.error("prefix table reload failed", path=self.config.prefix_table, error=str(e))
            return False
        self.mapper.swap_table(table)
        self.rules.table = table
        logger.info("prefix table swapped", path=self.config.prefix_table, prefixes=len(table))
        return True

    def counters(self):
        merged = {"ingest": dict(self.ingest_counters)}
        for stage in self.stages:
            merged[stage.name] = dict(stage.counters)
        return merged

    def dump_counters(self, event="counters"):
        logger.info(event, **self.counters())

    def service_requests(self):
        """Handle what the signal handlers asked for, outside signal context."""
        if self.dump_requested:
            self.dump_requested = False
            self.dump_counters()
        if self.reload_requested:
            self.reload_requested = False
            self.swap_prefix_table()

    def stop(self):
        self.running = False

    def close(self):
        for sink in self.sinks.values():
            sink.close()

    def install_signal_handlers(self):
        """Route SIGINT/SIGTERM, SIGUSR1 and SIGHUP to request flags. Returns the previous handlers."""
        def handle_stop(signum, frame):
            """Signal handler for SIGINT/SIGTERM."""
            self.running = False

        def handle_dump(signum, frame):
            """Signal handler for SIGUSR1 (counter dump)."""
            self.dump_requested = True

        def handle_reload(signum, frame):
            """Signal handler for SIGHUP (prefix table swap)."""
            self.reload_requested = True

        handlers = {signal.SIGINT: handle_stop, signal.SIGTERM: handle_stop}
        if hasattr(signal, "SIGUSR1"):
            handlers[signal.SIGUSR1] = handle_dump
        if hasattr(signal, "SIGHUP"):
            handlers[signal.SIGHUP] = handle_reload
        return {signum: signal.signal(signum, handler) for signum, handler in handlers.items()}


def run_replay(pipeline, path):
    counters = pipeline.ingest_counters = Counter()
    try:
        with open(path, "r", encoding="utf-8") as f:
            for record in read_replay(f, counters):
                pipeline.feed(record)
                pipeline.service_requests()
                if not pipeline.running:
                    break
    except OSError as e:
        raise InputError(f"cannot read replay {path}: {e}") from e


def run_pcap(pipeline, path):
    parsers = {}
    pipeline.ingest_counters = Counter()
    try:
        for exporter, payload in read_pcap(path):
            parser = parsers.get(exporter)
            if parser is None:
                parser = parsers[exporter] = NetflowV9Parser()
            for record in parser.parse(payload, exporter):
                pipeline.feed(record)
            pipeline.service_requests()
            if not pipeline.running:
                break
    except OSError as e:
        raise InputError(f"cannot read capture {path}: {e}") from e
    for parser in parsers.values():
        pipeline.ingest_counters.update(parser.counters)
    pipeline.ingest_counters["exporters"] = len(parsers)


def run_live(pipeline, host, port):
    collector = NetflowCollector(host, port)
    try:
        collector.bind()
    except OSError as e:
        raise InputError(f"cannot listen on {host}:{port}: {e}") from e
    collector.start()
    pipeline.advance_to(time.time())
    last_tick = time.time()
    try:
        while pipeline.running:
            try:
                record = collector.records.get(timeout=1.0)
            except queue.Empty:
                record = None
            if record is not None:
                pipeline.feed(record)
            now = time.time()
            if now - last_tick >= 1.0:
                pipeline.advance_to(now)
                last_tick = now
            pipeline.service_requests()
    finally:
        collector.stop()
        collector.join(timeout=5.0)
        while True:
            try:
                pipeline.feed(collector.records.get_nowait())
            except queue.Empty:
                break
        pipeline.ingest_counters = collector.counters()


def parse_listen(value):
    host, _, port = value.rpartition(":")
    try:
        return host or "0.0.0.0", int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected host:port, got {value!r}") from None


def build_settings(args):
    settings = Settings(args.settings)
    overrides = {
        key: getattr(args, key, None)
        for key in ("alpha", "theta", "tau", "nu_bps", "entropy_h", "delta_t", "warmup_intervals",
                    "startup_intervals", "sampling_rate", "late_grace_intervals", "max_future_intervals",
                    "idle_intervals", "top_n", "monitored_ports",
                    "prefix_table", "out_dir", "pre_margin_s", "post_margin_s")
    }
    if getattr(args, "archive_sketches", False):
        overrides["archive_sketches"] = True
    settings.override(**overrides)
    return settings


def cmd_run(args):
    settings = build_settings(args)
    p = settings.pipeline
    if args.replay:
        source, input_path = REPLAY, args.replay
    elif args.pcap:
        source, input_path = PCAP, args.pcap
    else:
        source, input_path = LIVE, None
    config = PipelineConfig(
        source=source,
        input_path=input_path,
        listen=args.listen or ("0.0.0.0", 2055),
        prefix_table=p["prefix_table"],
        detector=settings.detector_config(),
        monitored_ports=p["monitored_ports"],
        out_dir=p["out_dir"],
        top_n=p["top_n"],
        archive_sketches=p["archive_sketches"],
        sampling_rate=p["sampling_rate"],
        late_grace_intervals=p["late_grace_intervals"],
        max_future_intervals=p["max_future_intervals"],
        idle_intervals=p["idle_intervals"],
    )
    pipeline = Pipeline(config)
    previous = pipeline.install_signal_handlers()
    started = time.time()
    try:
        if source == REPLAY:
            run_replay(pipeline, input_path)
        elif source == PCAP:
            run_pcap(pipeline, input_path)
        else:
            run_live(pipeline, *config.listen)
        pipeline.flush()
    finally:
        pipeline.close()
        for signum, handler in previous.items():
            if handler is not None:
                signal.signal(signum, handler)
    pipeline.dump_counters("run finished")
    logger.info("outputs written", out_dir=str(pipeline.out_dir), seconds=round(time.time() - started, 3))
    return 0


def cmd_simulate(args):
    scenario = load_scenario(args.scenario)
    simulate(scenario, args.out, netflow=args.netflow, prefix_table_path=args.prefix_table_out)
    return 0


def _load_updates(path):
    counters = Counter()
    try:
        with open(path, "r", encoding="utf-8") as f:
            return load_updates(f, counters), counters
    except OSError as e:
        raise InputError(f"cannot read updates {path}: {e}") from e


def cmd_analyze_mitigation(args):
    settings = build_settings(args)
    p = settings.pipeline
    if not p["prefix_table"]:
        raise ConfigError("a prefix table is required (--prefix-table)")
    table = load_prefix_table_file(p["prefix_table"])
    updates, counters = _load_updates(args.updates)
    sessions = reporting.load_sessions(args.sessions)
    baseline = load_baseline_file(args.baseline) if args.baseline else None
    results = analyze_mitigation(sessions, updates, table, p["pre_margin_s"], p["post_margin_s"],
                                 baseline, counters)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for session, report in results:
            out.write(json.dumps(report.to_dict(session.start), sort_keys=True) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    logger.info("mitigation analysis finished", **dict(counters))
    return 0


def _read_jsonl(path, parse):
    items = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    items.append(parse(json.loads(line)))
                except (ValueError, KeyError, TypeError) as e:
                    raise InputError(f"{path}:{line_no}: {e}") from e
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}") from e
    return items


def cmd_gen_rules(args):
    settings = build_settings(args)
    p = settings.pipeline
    if not p["prefix_table"]:
        raise ConfigError("a prefix table is required (--prefix-table)")
    table = load_prefix_table_file(p["prefix_table"])
    alerts = _read_jsonl(args.alerts, DrdosAlert.from_dict)
    sessions = reporting.load_sessions(args.sessions) if args.sessions else []
    generator, records = replay_rule_log(alerts, sessions, table, p["top_n"])

    out_dir = Path(p["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "rules.jsonl", "w", encoding="utf-8") as jl, \
            open(out_dir / "rules.txt", "w", encoding="utf-8") as txt, \
            open(out_dir / "rules.exabgp", "w", encoding="utf-8") as exa:
        for record in records:
            jl.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
            if isinstance(record, FilterRule):
                txt.write(render_text(record) + "\n")
                exa.write(render_exabgp(record) + "\n")
    logger.info("rules generated", out_dir=str(out_dir), **generator.summary(), **dict(generator.counters))
    return 0


def _date(value):
    try:
        return dt.date.fromisoformat(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected YYYY-MM-DD, got {value!r}") from None


def cmd_report_stats(args):
    stats = reporting.compute_stats(reporting.load_sessions(args.sessions))
    if args.out_dir:
        reporting.write_stats(stats, Path(args.out_dir))
        logger.info("stats written", out_dir=args.out_dir, sessions=stats.total)
    else:
        print(json.dumps(stats.to_dict(), sort_keys=True, indent=2))
    return 0


def cmd_report_matrix(args):
    archive = reporting.load_sketch_archive(args.sketches)
    sessions = reporting.load_sessions(args.sessions) if args.sessions else []
    sources = args.src
    if sources is None and args.sample:
        sources = reporting.sample_sources(archive, args.dst_as, args.port, args.sample, args.seed)
    matrix = reporting.traffic_matrix(archive, sessions, args.dst_as, args.port,
                                      args.day_from, args.day_to, sources)
    frame = matrix.frame
    if args.collateral:
        frame = reporting.collateral_estimate(matrix, frame.index).to_frame()
    if args.out:
        frame.to_csv(args.out)
    else:
        frame.to_csv(sys.stdout)
    logger.info("matrix computed", rows=len(matrix.frame), excluded_bytes=matrix.excluded_bytes,
                total_bytes=matrix.total_bytes)
    return 0


def cmd_report_timeline(args):
    archive = reporting.load_sketch_archive(args.sketches)
    sessions = {s.session_id: s for s in reporting.load_sessions(args.sessions)}
    session = sessions.get(args.session_id)
    if session is None:
        raise InputError(f"session {args.session_id} not found in {args.sessions}")
    timeline = reporting.attack_timeline(archive, session, args.margin)
    timeline.to_csv(args.out if args.out else sys.stdout)
    return 0


def cmd_settings(args):
    settings = build_settings(args)
    for section in ("detector", "pipeline"):
        values = getattr(settings, section)
        print(f"[{section}]")
        for key in sorted(values):
            print(f"  {key} = {json.dumps(values[key])}    # {settings.get_description(key)}")
    if args.save:
        settings.save_settings(args.save)
        logger.info("settings saved", path=args.save)
    return 0


def add_detector_flags(parser):
    g = parser.add_argument_group("detector")
    g.add_argument("--alpha", type=float)
    g.add_argument("--theta", type=float)
    g.add_argument("--tau", type=float)
    g.add_argument("--nu-bps", dest="nu_bps", type=float)
    g.add_argument("--entropy-h", dest="entropy_h", type=float)
    g.add_argument("--delta-t", dest="delta_t", type=int)
    g.add_argument("--warmup", dest="warmup_intervals", type=int)
    g.add_argument("--startup", dest="startup_intervals", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="ixwatch", description="Streaming DRDoS detection for IXP flow telemetry")
    parser.add_argument("--settings", help="settings JSON file (default: ixwatch_settings.json if present)")
    parser.add_argument("--quiet", action="store_true", help="human-readable warnings only")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="detect attacks in replayed, captured or live flows")
    source = run.add_mutually_exclusive_group(required=True)
    source.add_argument("--replay", help="JSONL flow replay file")
    source.add_argument("--pcap", help="capture file of NetFlow v9 datagrams")
    source.add_argument("--listen", type=parse_listen, help="host:port to receive NetFlow v9 on")
    run.add_argument("--prefix-table", dest="prefix_table")
    run.add_argument("--monitored-ports", dest="monitored_ports")
    run.add_argument("--out-dir", dest="out_dir")
    run.add_argument("--top-n", dest="top_n", type=int)
    run.add_argument("--archive-sketches", dest="archive_sketches", action="store_true")
    run.add_argument("--sampling-rate", dest="sampling_rate", type=int)
    run.add_argument("--late-grace", dest="late_grace_intervals", type=int)
    run.add_argument("--max-future", dest="max_future_intervals", type=int)
    run.add_argument("--idle-intervals", dest="idle_intervals", type=int)
    add_detector_flags(run)
    run.set_defaults(func=cmd_run)

    sim = sub.add_parser("simulate", help="generate a synthetic scenario")
    sim.add_argument("--scenario", required=True)
    sim.add_argument("--out", required=True)
    sim.add_argument("--netflow", action="store_true", help="write NetFlow v9 datagrams into a pcap")
    sim.add_argument("--prefix-table-out", dest="prefix_table_out")
    sim.set_defaults(func=cmd_simulate)

    mit = sub.add_parser("analyze-mitigation", help="find blackholing and re-routing around attacks")
    mit.add_argument("--updates", required=True)
    mit.add_argument("--sessions", required=True)
    mit.add_argument("--prefix-table", dest="prefix_table")
    mit.add_argument("--baseline", help="explicit baseline origins (cidr asn per line)")
    mit.add_argument("--pre-margin", dest="pre_margin_s", type=int)
    mit.add_argument("--post-margin", dest="post_margin_s", type=int)
    mit.add_argument("--out")
    mit.set_defaults(func=cmd_analyze_mitigation)

    gen = sub.add_parser("gen-rules", help="derive filter rules from an alert log")
    gen.add_argument("--alerts", required=True)
    gen.add_argument("--sessions")
    gen.add_argument("--prefix-table", dest="prefix_table")
    gen.add_argument("--top-n", dest="top_n", type=int)
    gen.add_argument("--out-dir", dest="out_dir")
    gen.set_defaults(func=cmd_gen_rules)

    report = sub.add_parser("report", help="offline statistics")
    rsub = report.add_subparsers(dest="report", required=True)
    stats = rsub.add_parser("stats")
    stats.add_argument("--sessions", required=True)
    stats.add_argument("--out-dir", dest="out_dir")
    stats.set_defaults(func=cmd_report_stats)
    matrix = rsub.add_parser("matrix")
    matrix.add_argument("--sketches", required=True)
    matrix.add_argument("--sessions")
    matrix.add_argument("--dst-as", dest="dst_as", type=int, required=True)
    matrix.add_argument("--port", type=int, required=True)
    matrix.add_argument("--from", dest="day_from", type=_date, required=True)
    matrix.add_argument("--to", dest="day_to", type=_date, required=True)
    matrix.add_argument("--src", type=int, nargs="+")
    matrix.add_argument("--sample", type=int)
    matrix.add_argument("--seed", type=int, default=0)
    matrix.add_argument("--collateral", action="store_true")
    matrix.add_argument("--out")
    matrix.set_defaults(func=cmd_report_matrix)
    timeline = rsub.add_parser("timeline")
    timeline.add_argument("--sketches", required=True)
    timeline.add_argument("--sessions", required=True)
    timeline.add_argument("--session-id", dest="session_id", required=True)
    timeline.add_argument("--margin", type=int, default=1800)
    timeline.add_argument("--out")
    timeline.set_defaults(func=cmd_report_timeline)

    st = sub.add_parser("settings", help="show the effective settings")
    st.add_argument("--save")
    add_detector_flags(st)
    st.set_defaults(func=cmd_settings)
    return parser


def main(argv=None):
    """Entry point. Returns the process exit status."""
    args = build_parser().parse_args(argv)
    configure_logging(quiet=args.quiet, level=args.log_level)
    try:
        return args.func(args)
    except IxwatchError as e:
        logger.error("ixwatch failed", command=args.command, error=str(e), error_type=type(e).__name__)
        return e.exit_status
    except OSError as e:
        logger.error("I/O error", command=args.command, error=str(e), path=getattr(e, "filename", None))
        return 2


if __name__ == "__main__":
    sys.exit(main())
