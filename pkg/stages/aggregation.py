"""Per-interval traffic sketches keyed by (source port, destination AS)."""
import json
import math
from dataclasses import dataclass, field

import structlog

from errors import ConfigError, InputError
from stages.base import Stage

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class MonitoredPort:
    port: int
    service: str
    baf_low: float = None
    baf_high: float = None


# Reflection services watched by default, with their bandwidth amplification
# factors where one is known.
DEFAULT_MONITORED_PORTS = (
    MonitoredPort(53, "DNS", 28.0, 54.0),
    MonitoredPort(123, "NTP", 556.9, 556.9),
    MonitoredPort(389, "CLDAP", 56.0, 70.0),
    MonitoredPort(19, "CharGen", 358.8, 358.8),
    MonitoredPort(11211, "Memcached", 10000.0, 51000.0),
    MonitoredPort(111, "SunRPC", 7.0, 28.0),
    MonitoredPort(1900, "SSDP", 30.8, 30.8),
    MonitoredPort(161, "SNMP", 6.3, 6.3),
    MonitoredPort(27005, "SRCDS"),
    MonitoredPort(20800, "Call of Duty"),
    MonitoredPort(137, "NETBIOS", 3.8, 3.8),
    MonitoredPort(520, "RIP", 131.24, 131.24),
    MonitoredPort(27960, "Quake", 63.9, 63.9),
    MonitoredPort(29015, "Steam", 5.5, 5.5),
    MonitoredPort(17, "QOTD", 140.3, 140.3),
)


class MonitoredPortTable:
    """The set of UDP source ports whose traffic is aggregated."""

    def __init__(self, rows=DEFAULT_MONITORED_PORTS):
        self.rows = {}
        for row in rows:
            if row.port in self.rows:
                raise ConfigError(f"duplicate monitored port {row.port}")
            self.rows[row.port] = row
        self.ports = frozenset(self.rows)

    def __contains__(self, port):
        return port in self.ports

    def __len__(self):
        return len(self.rows)

    def service(self, port):
        row = self.rows.get(port)
        return row.service if row else None


def _parse_port_line(line):
    parts = line.split()
    if len(parts) < 2:
        raise ValueError("expected: port service [baf_low[-baf_high]]")
    port = int(parts[0])
    if not 0 <= port <= 65535:
        raise ValueError(f"port out of range: {port}")
    baf_low = baf_high = None
    service = " ".join(parts[1:])
    if len(parts) >= 3:
        try:
            low, _, high = parts[-1].partition("-")
            baf_low = float(low)
            baf_high = float(high) if high else baf_low
            service = " ".join(parts[1:-1])
        except ValueError:
            baf_low = baf_high = None
    return MonitoredPort(port, service, baf_low, baf_high)


def load_monitored_ports(path):
    """Read a monitored-ports file: "port service [baf_low[-baf_high]]" per line.

    A trailing token that is not a number or range is part of the service name.
    """
    rows = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_no, raw in enumerate(f, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                try:
                    rows.append(_parse_port_line(line))
                except ValueError as e:
                    raise ConfigError(f"{path}:{line_no}: {e}") from None
    except OSError as e:
        raise InputError(f"cannot read monitored ports {path}: {e}") from e
    if not rows:
        raise ConfigError(f"monitored ports file {path} has no entries")
    return MonitoredPortTable(rows)


def filter_flow(flow, ports):
    """Keep a flow only if its source port is a monitored reflection port."""
    return flow.src_port in ports


def bucket_of(timestamp, delta_t):
    """Start of the interval a timestamp belongs to."""
    return int(math.floor(timestamp / delta_t) * delta_t)


@dataclass
class TrafficSketch:
    """Bytes sent to one destination AS from one reflection port in one interval."""

    interval_start: int
    src_port: int
    dst_as: int
    bytes: int = 0
    per_src: dict = field(default_factory=dict)

    @property
    def key(self):
        return (self.src_port, self.dst_as)

    def to_dict(self):
        return {
            "t": self.interval_start,
            "src_port": self.src_port,
            "dst_as": self.dst_as,
            "bytes": self.bytes,
            "per_src": {str(asn): b for asn, b in sorted(self.per_src.items())},
        }

    @classmethod
    def from_dict(cls, obj):
        return cls(
            interval_start=int(obj["t"]),
            src_port=int(obj["src_port"]),
            dst_as=int(obj["dst_as"]),
            bytes=int(obj["bytes"]),
            per_src={int(asn): int(b) for asn, b in obj.get("per_src", {}).items()},
        )


def fold(flow, buckets, delta_t):
    """Add one kept flow's bytes to its interval's sketch."""
    t = bucket_of(flow.timestamp, delta_t)
    sketches = buckets.setdefault(t, {})
    key = (flow.src_port, flow.dst_as)
    sketch = sketches.get(key)
    if sketch is None:
        sketch = sketches[key] = TrafficSketch(t, flow.src_port, flow.dst_as)
    sketch.bytes += flow.bytes
    sketch.per_src[flow.src_as] = sketch.per_src.get(flow.src_as, 0) + flow.bytes
    return sketch


class SketchStore(Stage):
    """Folds AsFlows into sketches and emits each interval once it closes.

    Interval t closes when the cursor reaches t + delta_t * (1 + late_grace_intervals).
    In replay the cursor is the newest bucket seen; with wall_clock=True only
    advance_to() moves it. Closed intervals are emitted in time order with
    zero-sketches for tracked keys, so detection models observe silence.

    A flow more than max_future_intervals ahead of the cursor is dropped
    (0 disables the check). A key silent for idle_intervals closed intervals,
    or released through forget(), stops getting zero-sketches; once no key is
    tracked, empty stretches are skipped instead of stepped through.
    """

    def __init__(self, ports=None, delta_t=60, late_grace_intervals=1, archive=None,
                 max_future_intervals=60, idle_intervals=1440, wall_clock=False):
        super().__init__()
        if delta_t <= 0:
            raise ConfigError(f"delta_t must be positive, got {delta_t}")
        if late_grace_intervals < 0:
            raise ConfigError(f"late_grace_intervals must be >= 0, got {late_grace_intervals}")
        if max_future_intervals < 0:
            raise ConfigError(f"max_future_intervals must be >= 0, got {max_future_intervals}")
        if idle_intervals < 0:
            raise ConfigError(f"idle_intervals must be >= 0, got {idle_intervals}")
        self.ports = ports if ports is not None else MonitoredPortTable()
        self.delta_t = delta_t
        self.grace = late_grace_intervals
        self.archive = archive
        self.max_future = max_future_intervals
        self.idle = idle_intervals
        self.wall_clock = wall_clock
        self.buckets = {}
        self.tracked_keys = set()
        self.last_active = {}
        self.cursor = None
        self.last_closed = None

    @property
    def name(self):
        return "aggregation"

    def _horizon(self):
        return self.cursor - self.delta_t * (1 + self.grace)

    def _is_closed(self, t):
        if self.last_closed is not None and t <= self.last_closed:
            return True
        return self.cursor is not None and t <= self._horizon()

    def _too_far_ahead(self, t):
        return self.max_future > 0 and self.cursor is not None and t > self.cursor + self.max_future * self.delta_t

    def process(self, flow):
        if not filter_flow(flow, self.ports):
            self.counters["port_filtered"] += 1
            return []
        t = bucket_of(flow.timestamp, self.delta_t)
        if self._is_closed(t):
            self.counters["late_dropped"] += 1
            self.counters["late_dropped_bytes"] += flow.bytes
            return []
        if self._too_far_ahead(t):
            self.counters["future_dropped"] += 1
            self.counters["future_dropped_bytes"] += flow.bytes
            dropped = self.counters["future_dropped"]
            if dropped == 1 or dropped % 1000 == 0:
                logger.warning("flow too far ahead of the clock", bucket=t, cursor=self.cursor,
                               future_dropped=dropped)
            return []
        fold(flow, self.buckets, self.delta_t)
        self.counters["flows_folded"] += 1
        if not self.wall_clock and (self.cursor is None or t > self.cursor):
            return self.advance_to(t)
        return []

    def advance_to(self, timestamp):
        """Move the cursor forward and emit every interval that is now closed."""
        t = bucket_of(timestamp, self.delta_t)
        if self.cursor is None or t > self.cursor:
            self.cursor = t
        return self._close_through(self._horizon())

    def flush(self):
        """Close every interval up to the cursor."""
        if self.cursor is None:
            return []
        return self._close_through(self.cursor)

    def forget(self, key):
        """Stop emitting zero-sketches for a key until it carries traffic again."""
        if key in self.tracked_keys:
            self.tracked_keys.discard(key)
            self.last_active.pop(key, None)
            self.counters["keys_evicted"] += 1

    def _close_through(self, horizon):
        out = []
        if self.last_closed is None:
            if not self.buckets:
                return out
            t = min(self.buckets)
        else:
            t = self.last_closed + self.delta_t
        while t <= horizon:
            if t not in self.buckets and not self.tracked_keys:
                # nothing to emit until the next bucket with traffic
                ahead = [b for b in self.buckets if b > t]
                nxt = min(min(ahead, default=horizon + self.delta_t), horizon + self.delta_t)
                self.counters["intervals_skipped"] += (nxt - t) // self.delta_t
                self.last_closed = nxt - self.delta_t
                t = nxt
                continue
            out.extend(self.close_interval(t))
            t += self.delta_t
        return out

    def close_interval(self, t):
        """Emit the sketches of interval t in (srcPort, dstAS) order and free them.

        Keys seen before but silent in t get an explicit zero-sketch.
        """
        sketches = self.buckets.pop(t, {})
        for key, sketch in sketches.items():
            if sketch.bytes > 0:
                self.tracked_keys.add(key)
                self.last_active[key] = t
        if self.idle:
            for key in [k for k in self.tracked_keys if t - self.last_active[k] > self.idle * self.delta_t]:
                self.forget(key)
        for key in self.tracked_keys:
            if key not in sketches:
                sketches[key] = TrafficSketch(t, key[0], key[1])
                self.counters["zero_sketches"] += 1
        self.last_closed = t
        self.counters["intervals_closed"] += 1

        out = [sketches[key] for key in sorted(sketches)]
        self.counters["sketches_emitted"] += len(out)
        if self.archive is not None:
            for sketch in out:
                self.archive.write(json.dumps(sketch.to_dict(), sort_keys=True) + "\n")
        return out
