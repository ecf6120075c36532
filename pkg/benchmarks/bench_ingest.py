#!/usr/bin/env python3
"""Throughput of parse + map + aggregate over encoded NetFlow v9 datagrams.

    python benchmarks/bench_ingest.py --intervals 60 --sources 400
"""
import argparse
import io
import os
import sys
import time

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import structlog  # noqa: E402

from logsetup import configure_logging  # noqa: E402
from stages.aggregation import SketchStore  # noqa: E402
from stages.asn_map import FlowMapper, load_prefix_table  # noqa: E402
from stages.attacksim import (  # noqa: E402
    AttackSpec, BaselineSpec, Scenario, encode_netflow_v9, generate, write_prefix_table,
)
from stages.flow_ingest import NetflowV9Parser  # noqa: E402

logger = structlog.get_logger("bench_ingest")


def build_scenario(intervals, sources):
    return Scenario(
        seed=1,
        duration_intervals=intervals,
        baseline=[BaselineSpec(list(range(100, 100 + sources)), 2354, 53, 5e7, jitter=0.3)],
        attacks=[AttackSpec(2354, [123, 389], intervals // 3, 2 * intervals // 3, 1e9,
                            n_sources=sources, first_src_as=5000, jitter=0.1)],
    ).validate()


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--intervals", type=int, default=60)
    parser.add_argument("--sources", type=int, default=400)
    parser.add_argument("--min-rate", type=float, default=100_000.0,
                        help="records/second below which the exit status is 1")
    args = parser.parse_args(argv)
    configure_logging(level="INFO")

    scenario = build_scenario(args.intervals, args.sources)
    table_text = io.StringIO()
    write_prefix_table(scenario, table_text)
    table = load_prefix_table(io.StringIO(table_text.getvalue()))
    records = list(generate(scenario))
    datagrams = encode_netflow_v9(records, records_per_datagram=30)
    logger.info("input prepared", records=len(records), datagrams=len(datagrams))

    ingest = NetflowV9Parser()
    mapper = FlowMapper(table)
    store = SketchStore()
    sketches = 0
    started = time.perf_counter()
    for datagram in datagrams:
        for record in ingest.parse(datagram, "192.0.2.10"):
            for flow in mapper.process(record):
                sketches += len(store.process(flow))
    sketches += len(store.flush())
    elapsed = time.perf_counter() - started

    rate = ingest.counters["flows_parsed"] / elapsed if elapsed > 0 else float("inf")
    logger.info("ingest throughput", records=ingest.counters["flows_parsed"], seconds=round(elapsed, 3),
                records_per_second=round(rate), sketches=sketches)
    return 0 if rate >= args.min_rate else 1


if __name__ == "__main__":
    sys.exit(main())
