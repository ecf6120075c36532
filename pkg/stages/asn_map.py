"""IPv4 address to origin AS mapping over a "cidr asn" prefix table."""
import ipaddress
import time
from collections import defaultdict
from dataclasses import dataclass

import radix
import structlog

from errors import ConfigError, InputError
from stages.base import Stage
from stages.flow_ingest import UDP, SamplingConfig, apply_sampling

logger = structlog.get_logger(__name__)

UNMAPPED_AS = 0


class PrefixTable:
    """Longest-prefix-match table with a reverse AS -> prefixes index.

    The table is never mutated after load_prefix_table() returns; a refresh
    builds a new table and swaps the reference.
    """

    def __init__(self):
        self.tree = radix.Radix()
        self.by_as = defaultdict(set)
        self.loaded_at = None
        self.malformed = 0
        self.size = 0

    def add(self, cidr, asn):
        """Insert one entry. A repeated prefix replaces the earlier entry."""
        node = self.tree.search_exact(cidr)
        if node is not None:
            previous = node.data["asn"]
            self.by_as[previous].discard(cidr)
            if not self.by_as[previous]:
                del self.by_as[previous]
        else:
            node = self.tree.add(cidr)
            self.size += 1
        node.data["asn"] = asn
        self.by_as[asn].add(cidr)

    def lookup(self, address):
        """Return the origin AS of the most specific covering prefix, or 0."""
        node = self.tree.search_best(address)
        if node is None:
            return UNMAPPED_AS
        return node.data["asn"]

    def reverse(self, asn):
        """Return the set of prefixes announced by an AS."""
        return set(self.by_as.get(asn, ()))

    def __len__(self):
        return self.size


def parse_prefix_line(line):
    """Parse one "cidr asn" line into (normalized cidr, asn). Raises ValueError."""
    cidr, asn = line.split()
    network = ipaddress.IPv4Network(cidr, strict=False)
    asn = int(asn)
    if asn < 0:
        raise ValueError(f"negative AS number {asn}")
    return str(network), asn


def load_prefix_table(stream, source="<stream>"):
    """Build a PrefixTable from "cidr asn" lines.

    Blank lines and '#' comments are ignored; malformed lines are counted and
    skipped.

    Raises:
        ConfigError: No usable entry was found.
    """
    table = PrefixTable()
    for line_no, raw in enumerate(stream, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            cidr, asn = parse_prefix_line(line)
        except ValueError:
            table.malformed += 1
            logger.warning("malformed prefix line", source=source, line=line_no)
            continue
        table.add(cidr, asn)

    if len(table) == 0:
        raise ConfigError(f"prefix table {source} has no entries")
    table.loaded_at = time.time()
    logger.info("prefix table loaded", source=source, prefixes=len(table),
                ases=len(table.by_as), malformed=table.malformed)
    return table


def load_prefix_table_file(path):
    """Load a prefix table from a file path."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            return load_prefix_table(f, source=str(path))
    except OSError as e:
        raise InputError(f"cannot read prefix table {path}: {e}") from e


@dataclass(frozen=True, slots=True)
class AsFlow:
    """A UDP flow with both endpoints resolved to AS numbers."""

    timestamp: float
    src_as: int
    src_port: int
    dst_as: int
    dst_port: int
    packets: int
    bytes: int


def map_flow(record, table):
    """Resolve a FlowRecord's addresses; unmapped addresses become AS 0."""
    return AsFlow(
        timestamp=record.timestamp,
        src_as=table.lookup(record.src_ip),
        src_port=record.src_port,
        dst_as=table.lookup(record.dst_ip),
        dst_port=record.dst_port,
        packets=record.adjusted_packets,
        bytes=record.adjusted_bytes,
    )


class FlowMapper(Stage):
    """Sampling correction, UDP filter and AS mapping for raw flow records."""

    def __init__(self, table, sampling=None):
        super().__init__()
        self.table = table
        self.sampling = sampling or SamplingConfig()

    @property
    def name(self):
        return "mapper"

    def swap_table(self, table):
        """Replace the prefix table; later lookups see only the new one."""
        self.table = table
        self.counters["table_swaps"] += 1

    def process(self, record):
        if record.protocol != UDP:
            self.counters["non_udp_dropped"] += 1
            return []
        if self.sampling.sampling_rate != 1:
            record = apply_sampling(record, self.sampling)
        table = self.table
        flow = map_flow(record, table)
        if flow.src_as == UNMAPPED_AS:
            self.counters["unmapped_ips"] += 1
        if flow.dst_as == UNMAPPED_AS:
            self.counters["unmapped_ips"] += 1
        self.counters["flows_mapped"] += 1
        return [flow]

    def flush(self):
        return []
