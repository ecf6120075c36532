"""Flow ingestion: NetFlow v9 datagrams, pcap capture files and JSONL replay.

Everything ends up as a stream of FlowRecord values. Volume math downstream
always uses the adjusted (sampling-corrected) counts.
"""
import ipaddress
import json
import math
import socket
import struct
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Optional

import structlog

from errors import NetflowParseError, ReplayLineError

logger = structlog.get_logger(__name__)

NETFLOW_V9_VERSION = 9
HEADER = struct.Struct("!HHIIII")  # version, count, sysUptime, unixSecs, seq, sourceId
FLOWSET_HEADER = struct.Struct("!HH")
TEMPLATE_FLOWSET_ID = 0
OPTIONS_TEMPLATE_FLOWSET_ID = 1
MIN_DATA_FLOWSET_ID = 256

# NetFlow v9 field type IDs
IN_BYTES = 1
IN_PKTS = 2
PROTOCOL = 4
L4_SRC_PORT = 7
IPV4_SRC_ADDR = 8
L4_DST_PORT = 11
IPV4_DST_ADDR = 12
IPV6_SRC_ADDR = 27
IPV6_DST_ADDR = 28

NUMERIC_FIELDS = {
    IN_BYTES: "bytes",
    IN_PKTS: "packets",
    PROTOCOL: "protocol",
    L4_SRC_PORT: "src_port",
    L4_DST_PORT: "dst_port",
}
ADDRESS_FIELDS = {
    IPV4_SRC_ADDR: "src_ip",
    IPV4_DST_ADDR: "dst_ip",
}
REQUIRED_NAMES = frozenset(NUMERIC_FIELDS.values()) | frozenset(ADDRESS_FIELDS.values())
_STRUCT_CODES = {1: "B", 2: "H", 4: "I", 8: "Q"}

REPLAY_KEYS = ("ts", "src_ip", "src_port", "dst_ip", "dst_port", "proto", "packets", "bytes")

UDP = 17


@dataclass(frozen=True, slots=True)
class FlowRecord:
    """One parsed flow: 5-tuple plus raw and sampling-adjusted counts."""

    timestamp: float
    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    protocol: int
    packets: int
    bytes: int
    adjusted_packets: Optional[int] = None
    adjusted_bytes: Optional[int] = None

    def __post_init__(self):
        # Unsampled until apply_sampling says otherwise
        if self.adjusted_packets is None:
            object.__setattr__(self, "adjusted_packets", self.packets)
        if self.adjusted_bytes is None:
            object.__setattr__(self, "adjusted_bytes", self.bytes)

    def to_replay(self):
        """Return the record as one replay JSON line (raw counts)."""
        return json.dumps({
            "ts": self.timestamp,
            "src_ip": self.src_ip,
            "src_port": self.src_port,
            "dst_ip": self.dst_ip,
            "dst_port": self.dst_port,
            "proto": self.protocol,
            "packets": self.packets,
            "bytes": self.bytes,
        }, separators=(",", ":"))


@dataclass(frozen=True, slots=True)
class SamplingConfig:
    sampling_rate: int = 1

    def __post_init__(self):
        if isinstance(self.sampling_rate, bool) or not isinstance(self.sampling_rate, int) or self.sampling_rate < 1:
            raise ValueError(f"sampling_rate must be an integer >= 1, got {self.sampling_rate!r}")


def apply_sampling(record, cfg):
    """Scale a record's counts by the exporter's packet sampling rate."""
    rate = cfg.sampling_rate
    return replace(
        record,
        adjusted_packets=record.packets * rate,
        adjusted_bytes=record.bytes * rate,
    )


@dataclass
class Template:
    """A decoded data template with a precompiled record decoder."""

    template_id: int
    fields: list
    record_length: int
    decoder: Optional[struct.Struct] = None
    positions: dict = field(default_factory=dict)
    wide: frozenset = frozenset()
    has_ipv6: bool = False

    @classmethod
    def build(cls, template_id, fields):
        """Compile the struct layout for the fields the pipeline needs."""
        fmt = ["!"]
        positions = {}
        wide = set()
        index = 0
        has_ipv6 = False
        for field_type, length in fields:
            name = NUMERIC_FIELDS.get(field_type) or ADDRESS_FIELDS.get(field_type)
            if field_type in (IPV6_SRC_ADDR, IPV6_DST_ADDR):
                has_ipv6 = True
            if name is None or name in positions or length == 0:
                if length:
                    fmt.append(f"{length}x")
                continue
            if field_type in ADDRESS_FIELDS:
                if length != 4:
                    fmt.append(f"{length}x")
                    continue
                fmt.append("4s")
            elif length in _STRUCT_CODES:
                fmt.append(_STRUCT_CODES[length])
            else:
                # Odd-sized counter, converted with int.from_bytes
                fmt.append(f"{length}s")
                wide.add(index)
            positions[name] = index
            index += 1

        record_length = sum(length for _, length in fields)
        decoder = struct.Struct("".join(fmt)) if REQUIRED_NAMES <= set(positions) else None
        return cls(template_id, list(fields), record_length, decoder, positions, frozenset(wide), has_ipv6)


class TemplateCache:
    """Templates keyed by (source_id, template_id) for one exporter."""

    def __init__(self):
        self.templates = {}
        self.last_refresh = {}

    def add(self, source_id, template, now=None):
        key = (source_id, template.template_id)
        self.templates[key] = template
        self.last_refresh[key] = now if now is not None else time.time()

    def get(self, source_id, template_id):
        return self.templates.get((source_id, template_id))

    def __len__(self):
        return len(self.templates)


def parse_netflow_v9(datagram, cache, counters=None):
    """Decode one NetFlow v9 export datagram.

    Template flowsets update the cache; data flowsets decode to FlowRecords.
    Records whose template is unknown are counted and skipped.

    Args:
        datagram: The complete UDP payload.
        cache: The exporter's TemplateCache, updated in place.
        counters: Optional Counter receiving skip counts.

    Returns:
        The list of decoded FlowRecords.

    Raises:
        NetflowParseError: Short datagram, wrong version or a malformed flowset.
    """
    if counters is None:
        counters = Counter()
    datagram = bytes(datagram)
    size = len(datagram)
    if size < HEADER.size:
        raise NetflowParseError(f"short datagram ({size} bytes)")

    try:
        version, count, _uptime, unix_secs, _seq, source_id = HEADER.unpack_from(datagram, 0)
        if version != NETFLOW_V9_VERSION:
            raise NetflowParseError(f"unsupported version {version}")

        records = []
        accounted = 0
        unknown_flowsets = 0
        offset = HEADER.size
        while offset + FLOWSET_HEADER.size <= size:
            flowset_id, length = FLOWSET_HEADER.unpack_from(datagram, offset)
            if length < FLOWSET_HEADER.size or offset + length > size:
                raise NetflowParseError(f"bad flowset length {length} at offset {offset}")
            start, end = offset + FLOWSET_HEADER.size, offset + length

            if flowset_id == TEMPLATE_FLOWSET_ID:
                accounted += _parse_templates(datagram, start, end, source_id, cache, unix_secs, counters)
            elif flowset_id == OPTIONS_TEMPLATE_FLOWSET_ID:
                counters["options_flowsets_skipped"] += 1
            elif flowset_id >= MIN_DATA_FLOWSET_ID:
                template = cache.get(source_id, flowset_id)
                if template is None:
                    unknown_flowsets += 1
                else:
                    decoded, seen = _parse_data(datagram, start, end, template, unix_secs, counters)
                    records.extend(decoded)
                    accounted += seen
            else:
                counters["reserved_flowsets_skipped"] += 1
            offset = end
    except struct.error as e:
        raise NetflowParseError(f"truncated datagram: {e}") from e

    if unknown_flowsets:
        # Record length is unknown without the template; use the header count.
        counters["unknown_template_records"] += max(count - accounted, unknown_flowsets)
    return records


def _parse_templates(datagram, start, end, source_id, cache, now, counters):
    """Read every template record of a template flowset. Returns the record count."""
    parsed = 0
    while start + 4 <= end:
        template_id, field_count = struct.unpack_from("!HH", datagram, start)
        start += 4
        if start + 4 * field_count > end:
            raise NetflowParseError(f"template {template_id} overruns its flowset")
        fields = [struct.unpack_from("!HH", datagram, start + 4 * i) for i in range(field_count)]
        start += 4 * field_count
        parsed += 1

        template = Template.build(template_id, fields)
        if template_id < MIN_DATA_FLOWSET_ID or template.record_length == 0:
            counters["invalid_templates"] += 1
            continue
        cache.add(source_id, template, now)
    return parsed


def _parse_data(datagram, start, end, template, unix_secs, counters):
    """Decode the records of one data flowset. Returns (records, records seen)."""
    n = (end - start) // template.record_length
    if n == 0:
        return [], 0

    if template.decoder is None:
        reason = "ipv6_records_skipped" if template.has_ipv6 else "incomplete_template_records"
        counters[reason] += n
        return [], n

    pos = template.positions
    i_src, i_dst = pos["src_ip"], pos["dst_ip"]
    i_sport, i_dport, i_proto = pos["src_port"], pos["dst_port"], pos["protocol"]
    i_pkts, i_bytes = pos["packets"], pos["bytes"]
    wide = template.wide
    decoder = template.decoder
    step = template.record_length

    records = []
    for k in range(n):
        values = decoder.unpack_from(datagram, start + k * step)
        if wide:
            values = [int.from_bytes(v, "big") if j in wide else v for j, v in enumerate(values)]
        packets, octets = values[i_pkts], values[i_bytes]
        if packets > 0 and octets < packets:
            counters["invalid_records"] += 1
            continue
        records.append(FlowRecord(
            timestamp=unix_secs,
            src_ip=socket.inet_ntoa(values[i_src]),
            src_port=values[i_sport],
            dst_ip=socket.inet_ntoa(values[i_dst]),
            dst_port=values[i_dport],
            protocol=values[i_proto],
            packets=packets,
            bytes=octets,
        ))
    return records, n


class NetflowV9Parser:
    """Stateful NetFlow v9 decoder for one exporter.

    Malformed datagrams are dropped and counted; they never raise.
    """

    def __init__(self):
        self.cache = TemplateCache()
        self.counters = Counter()

    def parse(self, datagram, exporter=None):
        try:
            records = parse_netflow_v9(datagram, self.cache, self.counters)
        except NetflowParseError as e:
            self.counters["parse_errors"] += 1
            logger.debug("netflow datagram dropped", exporter=exporter, error=str(e))
            return []
        self.counters["datagrams"] += 1
        self.counters["flows_parsed"] += len(records)
        return records


def _ipv4(value, key, line_no):
    if not isinstance(value, str):
        raise ReplayLineError(line_no, f"{key} must be a dotted IPv4 string")
    try:
        return str(ipaddress.IPv4Address(value))
    except ValueError:
        raise ReplayLineError(line_no, f"{key} is not an IPv4 address: {value!r}") from None


def _number(obj, key, line_no):
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ReplayLineError(line_no, f"non-numeric value for {key}: {value!r}")
    return value


def _count(obj, key, line_no, upper=None):
    value = _number(obj, key, line_no)
    if value != int(value):
        raise ReplayLineError(line_no, f"{key} must be an integer, got {value!r}")
    value = int(value)
    if value < 0 or (upper is not None and value > upper):
        raise ReplayLineError(line_no, f"{key} out of range: {value}")
    return value


def parse_replay_line(line, line_no=1):
    """Parse one JSONL replay line into a FlowRecord. Unknown keys are ignored."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise ReplayLineError(line_no, f"invalid JSON: {e.msg}") from None
    if not isinstance(obj, dict):
        raise ReplayLineError(line_no, "expected a JSON object")

    for key in REPLAY_KEYS:
        if key not in obj:
            raise ReplayLineError(line_no, f"missing key: {key}")

    ts = _number(obj, "ts", line_no)
    if ts < 0:
        raise ReplayLineError(line_no, f"negative timestamp: {ts}")
    packets = _count(obj, "packets", line_no)
    octets = _count(obj, "bytes", line_no)
    if packets > 0 and octets < packets:
        raise ReplayLineError(line_no, f"bytes ({octets}) smaller than packets ({packets})")

    return FlowRecord(
        timestamp=ts,
        src_ip=_ipv4(obj["src_ip"], "src_ip", line_no),
        src_port=_count(obj, "src_port", line_no, 65535),
        dst_ip=_ipv4(obj["dst_ip"], "dst_ip", line_no),
        dst_port=_count(obj, "dst_port", line_no, 65535),
        protocol=_count(obj, "proto", line_no, 255),
        packets=packets,
        bytes=octets,
    )


def read_replay(stream, counters=None):
    """Yield FlowRecords from a JSONL stream, skipping (and counting) bad lines."""
    if counters is None:
        counters = Counter()
    for line_no, line in enumerate(stream, 1):
        if not line.strip():
            continue
        try:
            record = parse_replay_line(line, line_no)
        except ReplayLineError as e:
            counters["replay_rejected"] += 1
            logger.warning("replay line rejected", line=e.line_no, reason=e.reason)
            continue
        counters["flows_parsed"] += 1
        yield record


def read_pcap(path):
    """Yield (exporter_ip, udp_payload) for every UDP packet of a capture file."""
    from scapy.layers.inet import IP, UDP as UDPLayer
    from scapy.utils import PcapReader

    with PcapReader(str(path)) as reader:
        for packet in reader:
            if UDPLayer not in packet:
                continue
            exporter = packet[IP].src if IP in packet else None
            yield exporter, bytes(packet[UDPLayer].payload)


def write_pcap(datagrams, path, exporter="192.0.2.10", collector=("127.0.0.1", 2055)):
    """Write NetFlow datagrams into a capture file as UDP packets to the collector."""
    from scapy.layers.inet import IP, UDP as UDPLayer
    from scapy.packet import Raw
    from scapy.utils import wrpcap

    host, port = collector
    packets = [IP(src=exporter, dst=host) / UDPLayer(sport=2055, dport=port) / Raw(load=d) for d in datagrams]
    wrpcap(str(path), packets)
