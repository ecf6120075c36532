#!/usr/bin/env python3
"""Feed random and mutated datagrams to the NetFlow v9 parser for a fixed time.

Any exception escaping NetflowV9Parser.parse is a failure (exit status 1).

    python benchmarks/fuzz_netflow.py --seconds 3600
"""
import argparse
import os
import sys
import time

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np  # noqa: E402
import structlog  # noqa: E402

from logsetup import configure_logging  # noqa: E402
from stages.attacksim import encode_netflow_v9  # noqa: E402
from stages.flow_ingest import FlowRecord, NetflowV9Parser  # noqa: E402

logger = structlog.get_logger("fuzz_netflow")


def seeds():
    records = [FlowRecord(1_600_000_000 + i, f"10.0.{i}.1", 123, "10.1.0.1", 4000 + i, 17, 10, 4500 + i)
               for i in range(5)]
    return encode_netflow_v9(records, records_per_datagram=2)


def mutate(rng, datagram):
    data = bytearray(datagram)
    choice = int(rng.integers(0, 4))
    if choice == 0:
        for pos in rng.integers(0, len(data), size=int(rng.integers(1, 8))):
            data[int(pos)] = int(rng.integers(0, 256))
    elif choice == 1:
        data = data[:int(rng.integers(0, len(data)))]
    elif choice == 2:
        pos = int(rng.integers(0, len(data)))
        data[pos:pos] = rng.bytes(int(rng.integers(1, 64)))
    else:
        # keep the header, randomize the flowsets
        data[20:] = rng.bytes(len(data) - 20)
    return bytes(data)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seconds", type=float, default=60.0)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    configure_logging(level="INFO")

    rng = np.random.Generator(np.random.PCG64(args.seed))
    corpus = seeds()
    target = NetflowV9Parser()
    deadline = time.monotonic() + args.seconds
    cases = 0
    while time.monotonic() < deadline:
        for _ in range(1000):
            if rng.random() < 0.2:
                datagram = rng.bytes(int(rng.integers(0, 1500)))
            else:
                datagram = mutate(rng, corpus[int(rng.integers(0, len(corpus)))])
            try:
                target.parse(datagram, "fuzz")
            except Exception:
                logger.exception("parser raised", case=cases, datagram=datagram.hex())
                return 1
            cases += 1
    logger.info("fuzz finished", cases=cases, **dict(target.counters))
    return 0


if __name__ == "__main__":
    sys.exit(main())
