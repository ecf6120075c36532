"""Deterministic synthetic flow streams with scripted DRDoS attacks.

Every AS n in a scenario owns 10.{n >> 8}.{n & 255}.0/24, so a generated
stream comes with its own prefix table (write_prefix_table). Randomness comes
only from a PCG64 generator seeded by the scenario, drawn in a fixed order.
"""
import json
import struct
from dataclasses import dataclass, field

import numpy as np
import structlog

from errors import ConfigError, InputError
from stages.aggregation import DEFAULT_MONITORED_PORTS, MonitoredPortTable
from stages.detection import AttackSession, correlate_multivector
from stages.flow_ingest import (
    FLOWSET_HEADER, HEADER, IN_BYTES, IN_PKTS, IPV4_DST_ADDR, IPV4_SRC_ADDR,
    L4_DST_PORT, L4_SRC_PORT, NETFLOW_V9_VERSION, PROTOCOL, TEMPLATE_FLOWSET_ID, UDP,
    FlowRecord, write_pcap,
)

logger = structlog.get_logger(__name__)

UNIFORM = "uniform"
ZIPF = "zipf"
MEAN_PACKET_SIZE = 500
MAX_AS = 65535

# Template the encoder exports; order matches RECORD below.
TEMPLATE_ID = 256
TEMPLATE_FIELDS = (
    (IN_BYTES, 8),
    (IN_PKTS, 8),
    (PROTOCOL, 1),
    (L4_SRC_PORT, 2),
    (IPV4_SRC_ADDR, 4),
    (L4_DST_PORT, 2),
    (IPV4_DST_ADDR, 4),
)
RECORD = struct.Struct("!QQBH4sH4s")
RECORDS_PER_DATAGRAM = 40


def prefix_of(asn):
    if not 1 <= asn <= MAX_AS:
        raise ConfigError(f"simulated AS numbers must be in 1..{MAX_AS}, got {asn}")
    return f"10.{asn >> 8}.{asn & 255}.0/24"


def host_of(asn, host):
    return f"10.{asn >> 8}.{asn & 255}.{host}"


@dataclass
class BaselineSpec:
    src_ases: list
    dst_as: int
    port: int
    mean_bytes: float
    jitter: float = 0.0


@dataclass
class AttackSpec:
    dst_as: int
    ports: list
    start: int
    end: int
    total_bps: float
    n_sources: int = 40
    share: str = UNIFORM
    zipf_s: float = 2.0
    first_src_as: int = 1000
    jitter: float = 0.0
    ramp_intervals: int = 0

    @property
    def src_ases(self):
        return list(range(self.first_src_as, self.first_src_as + self.n_sources))

    def validate(self):
        if self.end <= self.start:
            raise ConfigError(f"attack on AS {self.dst_as}: end must be after start")
        if self.n_sources < 1:
            raise ConfigError(f"attack on AS {self.dst_as}: n_sources must be >= 1")
        if not self.ports:
            raise ConfigError(f"attack on AS {self.dst_as}: at least one port is required")
        if self.share not in (UNIFORM, ZIPF):
            raise ConfigError(f"unknown share distribution {self.share!r}")
        if not 0 <= self.jitter < 1:
            raise ConfigError("jitter must be in [0, 1)")
        for asn in self.src_ases + [self.dst_as]:
            prefix_of(asn)


@dataclass
class Scenario:
    seed: int
    duration_intervals: int
    baseline: list = field(default_factory=list)
    attacks: list = field(default_factory=list)
    delta_t: int = 60
    t0: int = 0

    def validate(self):
        if self.duration_intervals < 1:
            raise ConfigError("duration_intervals must be >= 1")
        if self.delta_t <= 0:
            raise ConfigError("delta_t must be positive")
        for spec in self.baseline:
            if not 0 <= spec.jitter < 1:
                raise ConfigError("jitter must be in [0, 1)")
            for asn in list(spec.src_ases) + [spec.dst_as]:
                prefix_of(asn)
        for attack in self.attacks:
            attack.validate()
        return self

    def ases(self):
        ases = set()
        for spec in self.baseline:
            ases.update(spec.src_ases)
            ases.add(spec.dst_as)
        for attack in self.attacks:
            ases.update(attack.src_ases)
            ases.add(attack.dst_as)
        return sorted(ases)

    def interval_start(self, i):
        return self.t0 + i * self.delta_t

    @classmethod
    def from_dict(cls, obj):
        try:
            scenario = cls(
                seed=int(obj["seed"]),
                duration_intervals=int(obj["duration_intervals"]),
                baseline=[BaselineSpec(**b) for b in obj.get("baseline", [])],
                attacks=[AttackSpec(**a) for a in obj.get("attacks", [])],
                delta_t=int(obj.get("delta_t", 60)),
                t0=int(obj.get("t0", 0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid scenario: {e}") from e
        return scenario.validate()


def load_scenario(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            obj = json.load(f)
    except OSError as e:
        raise InputError(f"cannot read scenario {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"scenario {path} is not valid JSON: {e}") from e
    return Scenario.from_dict(obj)


def write_prefix_table(scenario, stream):
    """Write the "cidr asn" table covering every AS of the scenario."""
    stream.write("# synthetic prefix plan\n")
    for asn in scenario.ases():
        stream.write(f"{prefix_of(asn)} {asn}\n")


def planned_shares(spec, total):
    """Split an interval's attack bytes over the attack's sources.

    Uniform shares are equal (the total is rounded to a multiple of the
    source count). Zipf shares are floored and the remainder goes to the
    largest source.
    """
    n = spec.n_sources
    if spec.share == UNIFORM:
        each = int(round(total / n))
        return [each] * n
    weights = 1.0 / np.arange(1, n + 1) ** spec.zipf_s
    weights /= weights.sum()
    shares = np.floor(total * weights).astype(np.int64)
    shares[0] += int(round(total)) - int(shares.sum())
    return [int(s) for s in shares]


def ramp_factor(spec, k):
    """Fraction of the peak reached k intervals after onset."""
    if spec.ramp_intervals <= 0:
        return 1.0
    return min(1.0, (k + 1) / spec.ramp_intervals)


def attack_bytes(spec, delta_t, k):
    """Target bytes of one attacked key in the k-th attack interval."""
    return spec.total_bps * delta_t / 8.0 * ramp_factor(spec, k)


def _jittered(rng, value, jitter):
    if jitter <= 0:
        return int(round(value))
    return int(round(value * rng.uniform(1.0 - jitter, 1.0 + jitter)))


def _flow(ts, src_as, src_port, dst_as, octets, host=1):
    packets = max(1, octets // MEAN_PACKET_SIZE)
    return FlowRecord(
        timestamp=ts,
        src_ip=host_of(src_as, host),
        src_port=src_port,
        dst_ip=host_of(dst_as, 10),
        dst_port=40000 + (src_as % 20000),
        protocol=UDP,
        packets=packets,
        bytes=octets,
    )


def generate(scenario, ports=None):
    """Yield the scenario's FlowRecords interval by interval.

    Within an interval, baseline flows come first (spec order, then source
    order), then attack flows (attack order, port order, source order).
    """
    ports = ports if ports is not None else MonitoredPortTable(DEFAULT_MONITORED_PORTS)
    for attack in scenario.attacks:
        for port in attack.ports:
            if port not in ports:
                logger.warning("attack port is not monitored", port=port, dst_as=attack.dst_as)

    rng = np.random.Generator(np.random.PCG64(scenario.seed))
    for i in range(scenario.duration_intervals):
        ts = scenario.interval_start(i)
        for spec in scenario.baseline:
            per_src = spec.mean_bytes / len(spec.src_ases)
            for src_as in spec.src_ases:
                octets = _jittered(rng, per_src, spec.jitter)
                if octets > 0:
                    yield _flow(ts, src_as, spec.port, spec.dst_as, octets)
        for attack in scenario.attacks:
            if not attack.start <= i < attack.end:
                continue
            total = attack_bytes(attack, scenario.delta_t, i - attack.start)
            for port in attack.ports:
                shares = planned_shares(attack, total)
                for src_as, share in zip(attack.src_ases, shares):
                    octets = _jittered(rng, share, attack.jitter)
                    if octets > 0:
                        yield _flow(ts, src_as, port, attack.dst_as, octets, host=2)


def ground_truth(scenario):
    """Planned attack traffic per (interval start, port, dstAS) with zero jitter."""
    truth = {}
    for attack in scenario.attacks:
        for i in range(attack.start, min(attack.end, scenario.duration_intervals)):
            total = attack_bytes(attack, scenario.delta_t, i - attack.start)
            shares = planned_shares(attack, total)
            per_src = {asn: s for asn, s in zip(attack.src_ases, shares) if s > 0}
            for port in attack.ports:
                truth[(scenario.interval_start(i), port, attack.dst_as)] = dict(per_src)
    return truth


def encode_netflow_v9(records, source_id=0, records_per_datagram=RECORDS_PER_DATAGRAM):
    """Encode FlowRecords as NetFlow v9 datagrams.

    Records sharing a timestamp go into the same datagrams (that timestamp is
    the export time); every datagram carries the template ahead of its data.
    """
    template = struct.pack("!HH", TEMPLATE_ID, len(TEMPLATE_FIELDS))
    template += b"".join(struct.pack("!HH", t, n) for t, n in TEMPLATE_FIELDS)
    template_flowset = FLOWSET_HEADER.pack(TEMPLATE_FLOWSET_ID, FLOWSET_HEADER.size + len(template)) + template

    datagrams = []
    sequence = 0
    batch = []

    def emit():
        nonlocal sequence
        body = b"".join(
            RECORD.pack(r.bytes, r.packets, r.protocol, r.src_port, _packed(r.src_ip),
                        r.dst_port, _packed(r.dst_ip))
            for r in batch
        )
        body += b"\x00" * (-(FLOWSET_HEADER.size + len(body)) % 4)
        data_flowset = FLOWSET_HEADER.pack(TEMPLATE_ID, FLOWSET_HEADER.size + len(body)) + body
        header = HEADER.pack(NETFLOW_V9_VERSION, len(batch) + 1, 0, int(batch[0].timestamp),
                             sequence, source_id)
        datagrams.append(header + template_flowset + data_flowset)
        sequence += 1

    for record in records:
        if batch and (record.timestamp != batch[0].timestamp or len(batch) >= records_per_datagram):
            emit()
            batch = []
        batch.append(record)
    if batch:
        emit()
    return datagrams


def _packed(address):
    return bytes(int(octet) for octet in address.split("."))


def write_replay(records, stream):
    n = 0
    for record in records:
        stream.write(record.to_replay() + "\n")
        n += 1
    return n


def simulate(scenario, out_path, netflow=False, prefix_table_path=None):
    """Generate a scenario into a replay file, or a pcap of NetFlow datagrams."""
    records = list(generate(scenario))
    if netflow:
        datagrams = encode_netflow_v9(records)
        write_pcap(datagrams, out_path)
        logger.info("scenario written", path=str(out_path), records=len(records), datagrams=len(datagrams))
    else:
        with open(out_path, "w", encoding="utf-8") as f:
            write_replay(records, f)
        logger.info("scenario written", path=str(out_path), records=len(records))
    if prefix_table_path:
        with open(prefix_table_path, "w", encoding="utf-8") as f:
            write_prefix_table(scenario, f)
    return len(records)


@dataclass
class CorpusTruth:
    durations: list
    short_count: int
    peaks: list
    group_sizes: dict


def session_corpus(n, seed=0, short_share=0.8, t0=1_600_000_000):
    """Synthetic closed sessions with a known duration shape.

    Exactly round(n * short_share) sessions last under ten minutes. Every
    tenth session starts with its predecessor on the same victim, forming a
    two-port multi-vector group.

    Returns:
        (sessions, CorpusTruth)
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    n_short = int(round(n * short_share))
    kinds = np.array([True] * n_short + [False] * (n - n_short))
    rng.shuffle(kinds)
    ports = [row.port for row in DEFAULT_MONITORED_PORTS]

    sessions = []
    durations = []
    peaks = []
    start = t0
    for i, short in enumerate(kinds):
        minutes = int(rng.integers(1, 10)) if short else int(rng.integers(10, 121))
        peak = float(np.round(rng.lognormal(mean=np.log(50e6), sigma=1.0), 3))
        n_src = int(rng.integers(1, 120))
        if i % 10 == 9 and sessions:
            prev = sessions[-1]
            dst_as = prev.dst_as
            port = next(p for p in ports if p != prev.src_port)
            begin = prev.start
        else:
            dst_as = int(rng.integers(1, MAX_AS))
            port = ports[int(rng.integers(0, len(ports)))]
            start += 6 * 3600
            begin = start
        session = AttackSession.open(dst_as, port, begin)
        session.peak_volume_bps = peak
        session.alert_intervals = list(range(begin, begin + minutes * 60, 60))
        session.source_peaks = {1000 + k: peak / n_src for k in range(n_src)}
        session.close(begin + minutes * 60)
        sessions.append(session)
        durations.append(float(minutes))
        peaks.append(peak)

    groups = correlate_multivector(sessions)
    sizes = {}
    for members in groups.values():
        sizes[len(members)] = sizes.get(len(members), 0) + 1
    truth = CorpusTruth(durations, sum(1 for d in durations if d < 10), peaks, sizes)
    return sessions, truth
