"""Online DRDoS detection over traffic sketches.

One EWMA model per (srcPort, dstAS) key scores every closed interval. An
anomalous interval freezes the model, so the pre-attack baseline decides both
when an attack starts and when it ends. Anomalous intervals then go through
the minimum-volume and source-AS entropy gates and become either a DrdosAlert
or an AnomalyLog.
"""
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import structlog

from errors import ConfigError, ContractViolation
from stages.base import Stage

logger = structlog.get_logger(__name__)

VOLUME = "volume"
ENTROPY = "entropy"

# Longest wait, in intervals, before a closed session is finalized without
# knowing whether a frozen sibling key will still alert.
MAX_FINALIZE_DELAY_INTERVALS = 60


@dataclass
class DetectorConfig:
    alpha: float = 0.9
    theta: float = 3.0
    tau: float = 0.5
    epsilon: float = 1e-6
    nu_bps: float = 5e6
    entropy_h: float = 0.4
    delta_t: int = 60
    warmup_intervals: int = 0
    startup_intervals: int = 10

    def validate(self):
        """Raise ConfigError if any parameter is outside its valid range."""
        checks = (
            (0 < self.alpha < 1, "alpha must be in (0, 1)"),
            (self.theta > 0, "theta must be positive"),
            (0 < self.tau < 1, "tau must be in (0, 1)"),
            (self.epsilon > 0, "epsilon must be positive"),
            (self.nu_bps > 0, "nu_bps must be positive"),
            (0 <= self.entropy_h < 1, "entropy_h must be in [0, 1)"),
            (self.delta_t > 0, "delta_t must be positive"),
            (self.warmup_intervals >= 0, "warmup_intervals must be >= 0"),
            (self.startup_intervals >= 0, "startup_intervals must be >= 0"),
        )
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self


@dataclass(frozen=True)
class EwmaModel:
    mu: float = 0.0
    var: float = 0.0
    frozen: bool = False
    frozen_since: Optional[int] = None  # interval of the last clean update
    anomaly_start: Optional[int] = None
    last_interval: Optional[int] = None
    observed: int = 0


@dataclass(frozen=True)
class DeviationScore:
    delta: float
    b: float
    mu: float
    sigma: float
    anomalous: bool


@dataclass
class DrdosAlert:
    interval: int
    dst_as: int
    src_port: int
    volume_bps: float
    bytes: int
    delta: float
    entropy: float
    source_breakdown: list
    session_id: Optional[str] = None

    def to_dict(self):
        return {
            "t": self.interval,
            "dst_as": self.dst_as,
            "src_port": self.src_port,
            "volume_bps": self.volume_bps,
            "bytes": self.bytes,
            "delta": self.delta,
            "entropy": self.entropy,
            "sources": [[asn, b] for asn, b in self.source_breakdown],
            "session_id": self.session_id,
        }

    @classmethod
    def from_dict(cls, obj):
        return cls(
            interval=int(obj["t"]),
            dst_as=int(obj["dst_as"]),
            src_port=int(obj["src_port"]),
            volume_bps=float(obj["volume_bps"]),
            bytes=int(obj["bytes"]),
            delta=float(obj["delta"]),
            entropy=float(obj["entropy"]),
            source_breakdown=[(int(asn), int(b)) for asn, b in obj["sources"]],
            session_id=obj.get("session_id"),
        )


@dataclass
class AnomalyLog:
    interval: int
    dst_as: int
    src_port: int
    volume_bps: float
    bytes: int
    delta: float
    entropy: float
    failed_gate: str
    session_id: Optional[str] = None

    def to_dict(self):
        return {
            "t": self.interval,
            "dst_as": self.dst_as,
            "src_port": self.src_port,
            "volume_bps": self.volume_bps,
            "bytes": self.bytes,
            "delta": self.delta,
            "entropy": self.entropy,
            "failed_gate": self.failed_gate,
            "session_id": self.session_id,
        }


@dataclass(frozen=True)
class AnomalyEnded:
    """The first clean interval after an anomaly on one key."""

    dst_as: int
    src_port: int
    start: int
    end: int


@dataclass
class AttackSession:
    """Consecutive anomalous intervals of one key that produced at least one alert."""

    session_id: str
    dst_as: int
    src_port: int
    start: int
    end: Optional[int] = None
    peak_volume_bps: float = 0.0
    alert_intervals: list = field(default_factory=list)
    source_peaks: dict = field(default_factory=dict)
    multi_vector_group: Optional[str] = None
    group_origin: Optional[int] = None
    truncated: bool = False

    @classmethod
    def open(cls, dst_as, src_port, start):
        return cls(f"{dst_as}-{src_port}-{start}", dst_as, src_port, start)

    def add_alert(self, alert):
        self.alert_intervals.append(alert.interval)
        self.peak_volume_bps = max(self.peak_volume_bps, alert.volume_bps)
        for asn, b in alert.source_breakdown:
            bps = to_bps(b, alert.volume_bps, alert.bytes)
            if bps > self.source_peaks.get(asn, 0.0):
                self.source_peaks[asn] = bps

    def close(self, end, truncated=False):
        self.end = end
        self.truncated = truncated

    @property
    def n_sources(self):
        return len(self.source_peaks)

    @property
    def duration_minutes(self):
        if self.end is None:
            return None
        return (self.end - self.start) / 60.0

    def to_dict(self):
        return {
            "session_id": self.session_id,
            "dst_as": self.dst_as,
            "src_port": self.src_port,
            "start": self.start,
            "end": self.end,
            "duration_minutes": self.duration_minutes,
            "peak_volume_bps": self.peak_volume_bps,
            "alert_intervals": list(self.alert_intervals),
            "n_sources": self.n_sources,
            "source_peaks": {str(asn): bps for asn, bps in sorted(self.source_peaks.items())},
            "multi_vector_group": self.multi_vector_group,
            "truncated": self.truncated,
        }

    @classmethod
    def from_dict(cls, obj):
        session = cls(
            session_id=obj["session_id"],
            dst_as=int(obj["dst_as"]),
            src_port=int(obj["src_port"]),
            start=int(obj["start"]),
            end=None if obj.get("end") is None else int(obj["end"]),
            peak_volume_bps=float(obj.get("peak_volume_bps", 0.0)),
            alert_intervals=list(obj.get("alert_intervals", [])),
            source_peaks={int(asn): float(bps) for asn, bps in obj.get("source_peaks", {}).items()},
            multi_vector_group=obj.get("multi_vector_group"),
            truncated=bool(obj.get("truncated", False)),
        )
        return session


@dataclass(frozen=True)
class SessionClosed:
    session: AttackSession


@dataclass(frozen=True)
class SessionFinalized:
    """A closed session whose multi-vector group can no longer change."""

    session: AttackSession


def to_bps(part, volume_bps, total):
    """Scale a share of an interval's bytes to the interval's bits per second."""
    if total <= 0:
        return 0.0
    return volume_bps * part / total


def bytes_to_bps(b, delta_t):
    return b * 8.0 / delta_t


def ewma_update(model, b, cfg):
    """Fold one clean observation into the moving mean and variance."""
    if model.frozen:
        raise ContractViolation("ewma_update called on a frozen model")
    alpha = cfg.alpha
    mu = alpha * model.mu + (1 - alpha) * b
    var = (1 - alpha) * (model.var + alpha * (b - model.mu) ** 2)
    return replace(model, mu=mu, var=var, observed=model.observed + 1)


def score(model, b, cfg):
    """Deviation of b above the model's tolerance band, scaled into [0, 1)."""
    sigma = math.sqrt(model.var)
    delta = max(0.0, (b - (model.mu + cfg.theta * sigma)) / (b + cfg.epsilon))
    return DeviationScore(delta, b, model.mu, sigma, delta > cfg.tau)


def volume_gate(sketch, cfg):
    return bytes_to_bps(sketch.bytes, cfg.delta_t) >= cfg.nu_bps


def source_entropy(per_src):
    """Normalized Shannon entropy of the per-source byte shares (0 for one source)."""
    shares = np.fromiter((b for b in per_src.values() if b > 0), dtype=float)
    n = shares.size
    if n < 2:
        return 0.0
    p = shares / shares.sum()
    h = float(-(p * np.log(p)).sum() / math.log(n))
    return min(1.0, max(0.0, h))


def entropy_gate(sketch, cfg):
    h = source_entropy(sketch.per_src)
    return h, h > cfg.entropy_h


def source_breakdown(per_src):
    """(srcAS, bytes) pairs by descending bytes, ascending AS on ties."""
    return sorted(per_src.items(), key=lambda item: (-item[1], item[0]))


def evaluate_gates(sketch, s, cfg):
    """Turn an anomalous interval into a DrdosAlert, or an AnomalyLog naming the failed gate."""
    bps = bytes_to_bps(sketch.bytes, cfg.delta_t)
    h, entropy_ok = entropy_gate(sketch, cfg)
    fields = dict(
        interval=sketch.interval_start,
        dst_as=sketch.dst_as,
        src_port=sketch.src_port,
        volume_bps=bps,
        bytes=sketch.bytes,
        delta=s.delta,
        entropy=h,
    )
    if not volume_gate(sketch, cfg):
        return AnomalyLog(failed_gate=VOLUME, **fields)
    if not entropy_ok:
        return AnomalyLog(failed_gate=ENTROPY, **fields)
    return DrdosAlert(source_breakdown=source_breakdown(sketch.per_src), **fields)


def step(model, sketch, cfg, learning=False):
    """Advance one key's model by one closed interval.

    Returns:
        (model', events) where events holds at most one DrdosAlert or
        AnomalyLog, or an AnomalyEnded when a frozen model sees a clean
        interval again. While learning, an unfrozen model is updated
        unconditionally and nothing is emitted.

    Raises:
        ContractViolation: The interval is not newer than the last one seen.
    """
    t = sketch.interval_start
    if model.last_interval is not None and t <= model.last_interval:
        raise ContractViolation(
            f"interval {t} for key ({sketch.src_port}, {sketch.dst_as}) "
            f"is not after {model.last_interval}"
        )
    b = sketch.bytes
    events = []
    s = score(model, b, cfg)

    if not model.frozen and (learning or model.observed < cfg.warmup_intervals):
        model = replace(ewma_update(model, b, cfg), frozen_since=t)
    elif s.anomalous:
        if not model.frozen:
            model = replace(model, frozen=True, anomaly_start=t)
        events.append(evaluate_gates(sketch, s, cfg))
    elif model.frozen:
        start = model.anomaly_start
        model = replace(model, frozen=False, anomaly_start=None)
        model = replace(ewma_update(model, b, cfg), frozen_since=t)
        events.append(AnomalyEnded(sketch.dst_as, sketch.src_port, start, t))
    else:
        model = replace(ewma_update(model, b, cfg), frozen_since=t)

    return replace(model, last_interval=t), events


def _overlaps(a, b):
    a_end = math.inf if a.end is None else a.end
    b_end = math.inf if b.end is None else b.end
    return a.start < b_end and b.start < a_end


def correlate_multivector(sessions):
    """Group sessions that hit the same destination AS at overlapping times.

    Grouping is the transitive closure of pairwise overlap. Every session in a
    group of two or more gets the same multi_vector_group id; a session that
    already belongs to a group keeps that group's id.

    Returns:
        Mapping of group id to the list of member sessions.
    """
    sessions = list(sessions)
    parent = list(range(len(sessions)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    by_dst = {}
    for i, s in enumerate(sessions):
        by_dst.setdefault(s.dst_as, []).append(i)
    for members in by_dst.values():
        for x, i in enumerate(members):
            for j in members[x + 1:]:
                if _overlaps(sessions[i], sessions[j]):
                    parent[find(i)] = find(j)

    components = {}
    for i in range(len(sessions)):
        components.setdefault(find(i), []).append(sessions[i])

    groups = {}
    for members in components.values():
        if len(members) < 2:
            continue
        origin = min(s.start for s in members)
        origin = min([origin] + [s.group_origin for s in members if s.group_origin is not None])
        group_id = f"mv-{members[0].dst_as}-{origin}"
        for s in members:
            s.multi_vector_group = group_id
            s.group_origin = origin
        groups[group_id] = sorted(members, key=lambda s: (s.start, s.src_port))
    return groups


class DrdosDetector(Stage):
    """Streaming detector: one model per sketch key plus attack session bookkeeping.

    Every key learns unconditionally during the first startup_intervals
    intervals after the first sketch, so traffic already present at start
    becomes baseline. A model whose band has decayed below one byte on a
    silent interval is dropped and on_evict(key) is called.

    A closed session is reported twice: SessionClosed right away, and
    SessionFinalized once no frozen sibling key on the same destination could
    still open a session overlapping it.
    """

    def __init__(self, cfg=None, on_evict=None):
        super().__init__()
        self.cfg = (cfg or DetectorConfig()).validate()
        self.on_evict = on_evict
        self.models = {}
        self.open_sessions = {}
        self.recent_closed = {}
        self.pending = {}
        self.first_interval = None
        self.last_interval = None

    @property
    def name(self):
        return "detection"

    def learning(self, t):
        return t < self.first_interval + self.cfg.startup_intervals * self.cfg.delta_t

    def process(self, sketch):
        key = sketch.key
        model = self.models.get(key)
        if model is None:
            if sketch.bytes == 0:
                return []
            model = EwmaModel()
        if self.first_interval is None:
            self.first_interval = sketch.interval_start
        model, events = step(model, sketch, self.cfg, self.learning(sketch.interval_start))
        self.models[key] = model
        if self.last_interval is None or sketch.interval_start > self.last_interval:
            self.last_interval = sketch.interval_start

        out = []
        for event in events:
            if isinstance(event, DrdosAlert):
                session = self.open_sessions.get(key)
                if session is None:
                    session = AttackSession.open(sketch.dst_as, sketch.src_port, model.anomaly_start)
                    self.open_sessions[key] = session
                    self.counters["sessions_opened"] += 1
                    logger.info("attack session opened", session_id=session.session_id,
                                dst_as=session.dst_as, src_port=session.src_port)
                    self._correlate(session.dst_as)
                session.add_alert(event)
                event.session_id = session.session_id
                self.counters["alerts"] += 1
                out.append(event)
            elif isinstance(event, AnomalyLog):
                session = self.open_sessions.get(key)
                event.session_id = session.session_id if session else None
                self.counters["anomaly_logs"] += 1
                self.counters[f"anomaly_logs_{event.failed_gate}"] += 1
                out.append(event)
            elif isinstance(event, AnomalyEnded):
                session = self.open_sessions.pop(key, None)
                if session is not None:
                    session.close(event.end)
                    out.append(self._finish(session))

        if sketch.bytes == 0 and self._decayed(key, model):
            del self.models[key]
            self.counters["models_evicted"] += 1
            if self.on_evict is not None:
                self.on_evict(key)
        if sketch.dst_as in self.pending:
            out.extend(self._release(sketch.dst_as, now=sketch.interval_start))
        return out

    def _decayed(self, key, model):
        if model.frozen or key in self.open_sessions:
            return False
        return model.mu + self.cfg.theta * math.sqrt(model.var) < 1.0

    def _blocking_starts(self, dst):
        """anomaly_start of frozen keys on dst that have no session yet."""
        return [m.anomaly_start for k, m in self.models.items()
                if k[1] == dst and m.frozen and k not in self.open_sessions]

    def _correlate(self, dst):
        open_same_dst = [s for s in self.open_sessions.values() if s.dst_as == dst]
        correlate_multivector(open_same_dst + self.recent_closed.get(dst, []))
        return open_same_dst

    def _prune(self, dst):
        # A closed session can only overlap sessions that started before it
        # ended, including those a frozen key may still open.
        starts = [s.start for s in self.open_sessions.values() if s.dst_as == dst]
        horizon = min(starts + self._blocking_starts(dst), default=math.inf)
        recent = [s for s in self.recent_closed.get(dst, []) if s.end > horizon]
        if recent:
            self.recent_closed[dst] = recent
        else:
            self.recent_closed.pop(dst, None)

    def _finish(self, session):
        dst = session.dst_as
        self.recent_closed.setdefault(dst, []).append(session)
        self._correlate(dst)
        self._prune(dst)
        self.pending.setdefault(dst, []).append(session)

        self.counters["sessions"] += 1
        if session.truncated:
            self.counters["sessions_truncated"] += 1
        logger.info("attack session closed", session_id=session.session_id,
                    duration_minutes=session.duration_minutes,
                    peak_volume_bps=session.peak_volume_bps,
                    multi_vector_group=session.multi_vector_group,
                    truncated=session.truncated)
        return SessionClosed(session)

    def _release(self, dst, now=None, force=False):
        blocking = [] if force else self._blocking_starts(dst)
        horizon = min(blocking, default=math.inf)
        if now is not None:
            # a key frozen without alerting for this long no longer holds sessions back
            horizon = max(horizon, now - MAX_FINALIZE_DELAY_INTERVALS * self.cfg.delta_t)
        ready = [s for s in self.pending[dst] if s.end <= horizon]
        held = [s for s in self.pending[dst] if s.end > horizon]
        if held:
            self.pending[dst] = held
        else:
            self.pending.pop(dst)
        self._prune(dst)
        return [SessionFinalized(s) for s in ready]

    def flush(self):
        """Close the sessions still open at end of input, flagged truncated."""
        out = []
        for key in sorted(self.open_sessions):
            session = self.open_sessions.pop(key)
            end = self.models[key].last_interval
            session.close(end, truncated=True)
            out.append(self._finish(session))
        for dst in sorted(self.pending):
            out.extend(self._release(dst, force=True))
        return out


def reference_trajectory(series, cfg):
    """Recompute the model trajectory of one key from scratch at every interval.

    Slow by construction: each row replays all clean observations so far.
    Rows hold the (mu, var) the interval was scored against, its delta and
    the frozen flag after the interval.
    """
    rows = []
    clean = []
    frozen = False
    for b in series:
        mu, var = 0.0, 0.0
        for x in clean:
            mu, var = cfg.alpha * mu + (1 - cfg.alpha) * x, (1 - cfg.alpha) * (var + cfg.alpha * (x - mu) ** 2)
        sigma = math.sqrt(var)
        delta = max(0.0, (b - (mu + cfg.theta * sigma)) / (b + cfg.epsilon))
        if (not frozen and len(clean) < cfg.warmup_intervals) or delta <= cfg.tau:
            clean.append(b)
            frozen = False
        else:
            frozen = True
        rows.append({"mu": mu, "var": var, "delta": delta, "frozen": frozen})
    return rows


def trajectory(series, cfg, t0=0):
    """The streaming detector's trajectory in the same shape as reference_trajectory."""
    from stages.aggregation import TrafficSketch

    model = EwmaModel()
    rows = []
    for i, b in enumerate(series):
        sketch = TrafficSketch(t0 + i * cfg.delta_t, 0, 0, b, {1: b} if b else {})
        mu, var = model.mu, model.var
        delta = score(model, b, cfg).delta
        model, _ = step(model, sketch, cfg)
        rows.append({"mu": mu, "var": var, "delta": delta, "frozen": model.frozen})
    return rows
