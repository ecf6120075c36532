"""Blackholing and re-routing evidence in a BGP update log around attacks."""
import ipaddress
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import structlog

from errors import InputError, ReplayLineError
from stages.asn_map import parse_prefix_line

logger = structlog.get_logger(__name__)

ANNOUNCE = "announce"
WITHDRAW = "withdraw"
BLACKHOLE_NEXT_HOP = "192.0.2.1"
BLACKHOLE_COMMUNITY_VALUE = 666
DAY = 86400

BLACKHOLE_NEXTHOP = "blackhole_nexthop"
BLACKHOLE_COMMUNITY = "blackhole_community"
REROUTE = "reroute"


@dataclass(frozen=True)
class BgpUpdate:
    timestamp: float
    kind: str
    prefix: str
    origin_as: Optional[int] = None
    next_hop: Optional[str] = None
    communities: tuple = ()

    @property
    def network(self):
        return ipaddress.IPv4Network(self.prefix)

    def to_dict(self):
        obj = {"ts": self.timestamp, "kind": self.kind, "prefix": self.prefix}
        if self.kind == ANNOUNCE:
            obj["origin_as"] = self.origin_as
            obj["next_hop"] = self.next_hop
            obj["communities"] = [f"{a}:{v}" for a, v in self.communities]
        return obj


def _parse_community(text, line_no):
    try:
        asn, _, value = str(text).partition(":")
        return int(asn), int(value)
    except ValueError:
        raise ReplayLineError(line_no, f"bad community {text!r}") from None


def parse_update_line(line, line_no=1):
    """Parse one JSONL update record."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise ReplayLineError(line_no, f"invalid JSON: {e.msg}") from None
    if not isinstance(obj, dict):
        raise ReplayLineError(line_no, "expected a JSON object")
    for key in ("ts", "kind", "prefix"):
        if key not in obj:
            raise ReplayLineError(line_no, f"missing key: {key}")
    kind = obj["kind"]
    try:
        prefix = str(ipaddress.IPv4Network(obj["prefix"], strict=False))
        ts = float(obj["ts"])
    except (TypeError, ValueError) as e:
        raise ReplayLineError(line_no, str(e)) from None

    if kind == WITHDRAW:
        if any(obj.get(k) for k in ("origin_as", "next_hop", "communities")):
            raise ReplayLineError(line_no, "withdraw carries announce attributes")
        return BgpUpdate(ts, WITHDRAW, prefix)
    if kind != ANNOUNCE:
        raise ReplayLineError(line_no, f"unknown kind {kind!r}")

    try:
        origin = int(obj["origin_as"])
    except (KeyError, TypeError, ValueError):
        raise ReplayLineError(line_no, "announce needs an integer origin_as") from None
    next_hop = obj.get("next_hop")
    if next_hop is not None:
        try:
            next_hop = str(ipaddress.IPv4Address(next_hop))
        except ValueError:
            raise ReplayLineError(line_no, f"bad next_hop {next_hop!r}") from None
    communities = tuple(_parse_community(c, line_no) for c in obj.get("communities") or ())
    return BgpUpdate(ts, ANNOUNCE, prefix, origin, next_hop, communities)


def load_updates(stream, counters=None):
    """Read a JSONL update log, skipping bad lines. Returns updates sorted by time."""
    if counters is None:
        counters = Counter()
    updates = []
    for line_no, line in enumerate(stream, 1):
        if not line.strip():
            continue
        try:
            updates.append(parse_update_line(line, line_no))
        except ReplayLineError as e:
            counters["updates_rejected"] += 1
            logger.warning("bgp update rejected", line=e.line_no, reason=e.reason)
    updates.sort(key=lambda u: u.timestamp)
    counters["updates"] += len(updates)
    return updates


@dataclass(frozen=True)
class Window:
    start: float
    end: float

    def __contains__(self, ts):
        return self.start <= ts <= self.end


def window_for_session(session, pre_margin_s=600, post_margin_s=3600):
    end = session.end if session.end is not None else session.start
    return Window(session.start - pre_margin_s, end + post_margin_s)


@dataclass
class MitigationFinding:
    kind: str
    session_id: Optional[str]
    prefix: str
    evidence: list = field(default_factory=list)
    previous_origin: Optional[int] = None
    temporary_origin: Optional[int] = None
    revert_seen: bool = False
    revert_time: Optional[float] = None

    @property
    def first_seen(self):
        return min(u.timestamp for u in self.evidence)

    def to_dict(self):
        obj = {
            "kind": self.kind,
            "session_id": self.session_id,
            "prefix": self.prefix,
            "evidence": [u.to_dict() for u in self.evidence],
        }
        if self.kind == REROUTE:
            obj.update(previous_origin=self.previous_origin, temporary_origin=self.temporary_origin,
                       revert_seen=self.revert_seen, revert_time=self.revert_time)
        return obj


def _victim_networks(victim_prefixes):
    return [ipaddress.IPv4Network(p) for p in victim_prefixes]


def _relevant(update, victims):
    network = update.network
    return any(network.overlaps(v) for v in victims)


def detect_blackholing(updates, victim_prefixes, window, session_id=None):
    """Announcements in the window that blackhole (part of) a victim prefix.

    An announce qualifies by the reserved next hop, by any community whose
    value is 666, or both (two findings).
    """
    victims = _victim_networks(victim_prefixes)
    findings = []
    for u in updates:
        if u.kind != ANNOUNCE or u.timestamp not in window or not _relevant(u, victims):
            continue
        if u.next_hop == BLACKHOLE_NEXT_HOP:
            findings.append(MitigationFinding(BLACKHOLE_NEXTHOP, session_id, u.prefix, [u]))
        if any(value == BLACKHOLE_COMMUNITY_VALUE for _, value in u.communities):
            findings.append(MitigationFinding(BLACKHOLE_COMMUNITY, session_id, u.prefix, [u]))
    return findings


def baseline_origin(prefix, baseline_origins):
    """Origin of the exact prefix, else of the longest baseline prefix covering it."""
    if prefix in baseline_origins:
        return baseline_origins[prefix]
    network = ipaddress.IPv4Network(prefix)
    best = None
    for candidate, origin in baseline_origins.items():
        c = ipaddress.IPv4Network(candidate)
        if network.subnet_of(c) and (best is None or c.prefixlen > best[0]):
            best = (c.prefixlen, origin)
    return best[1] if best else None


def detect_reroute(updates, victim_as, victim_prefixes, baseline_origins, window,
                   session_id=None, counters=None):
    """Temporary origin changes of victim prefixes, with revert tracking.

    One finding per (prefix, temporary origin). The revert is the first later
    announce of the prefix that restores the baseline origin, searched to the
    end of the log.
    """
    if counters is None:
        counters = Counter()
    victims = _victim_networks(victim_prefixes)
    findings = {}
    for i, u in enumerate(updates):
        if u.kind != ANNOUNCE or u.timestamp not in window or not _relevant(u, victims):
            continue
        baseline = baseline_origin(u.prefix, baseline_origins)
        if baseline is None:
            counters["reroute_unresolvable"] += 1
            continue
        if u.origin_as == baseline or u.origin_as == victim_as:
            continue
        key = (u.prefix, u.origin_as)
        if key in findings:
            continue
        finding = MitigationFinding(REROUTE, session_id, u.prefix, [u],
                                    previous_origin=baseline, temporary_origin=u.origin_as)
        for later in updates[i + 1:]:
            if (later.kind == ANNOUNCE and later.prefix == u.prefix
                    and later.origin_as == baseline and later.timestamp >= u.timestamp):
                finding.revert_seen = True
                finding.revert_time = later.timestamp
                finding.evidence.append(later)
                break
        findings[key] = finding
    return list(findings.values())


def derive_baseline(updates, attack_start):
    """Origin per prefix at the end of the UTC day before the attack's day."""
    day_start = attack_start - attack_start % DAY
    origins = {}
    for u in updates:
        if u.timestamp < day_start - DAY:
            continue
        if u.timestamp >= day_start:
            break
        if u.kind == ANNOUNCE:
            origins[u.prefix] = u.origin_as
        else:
            origins.pop(u.prefix, None)
    return origins


def load_baseline_file(path):
    """Read explicit baseline origins ("cidr asn" per line)."""
    origins = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_no, raw in enumerate(f, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                try:
                    cidr, asn = parse_prefix_line(line)
                except ValueError:
                    logger.warning("malformed baseline line", path=str(path), line=line_no)
                    continue
                origins[cidr] = asn
    except OSError as e:
        raise InputError(f"cannot read baseline file {path}: {e}") from e
    return origins


@dataclass
class MitigationReport:
    session_id: str
    dst_as: int
    src_port: int
    findings: list

    @property
    def kinds(self):
        return sorted({f.kind for f in self.findings})

    @property
    def mitigated(self):
        return bool(self.findings)

    def delay_minutes(self, start):
        if not self.findings:
            return None
        return (min(f.first_seen for f in self.findings) - start) / 60.0

    def to_dict(self, start):
        return {
            "session_id": self.session_id,
            "dst_as": self.dst_as,
            "src_port": self.src_port,
            "mitigated": self.mitigated,
            "kinds": self.kinds,
            "delay_minutes": self.delay_minutes(start),
            "findings": [f.to_dict() for f in self.findings],
        }


def analyze_session(session, updates, table, pre_margin_s=600, post_margin_s=3600,
                    baseline_origins=None, counters=None):
    """All blackholing and re-routing findings for one attack session."""
    victim_prefixes = table.reverse(session.dst_as)
    if not victim_prefixes:
        logger.warning("victim AS has no known prefixes", session_id=session.session_id,
                       dst_as=session.dst_as)
        return MitigationReport(session.session_id, session.dst_as, session.src_port, [])
    window = window_for_session(session, pre_margin_s, post_margin_s)
    if baseline_origins is None:
        baseline_origins = derive_baseline(updates, session.start)
    findings = detect_blackholing(updates, victim_prefixes, window, session.session_id)
    findings += detect_reroute(updates, session.dst_as, victim_prefixes, baseline_origins,
                               window, session.session_id, counters)
    findings.sort(key=lambda f: (f.first_seen, f.kind, f.prefix))
    return MitigationReport(session.session_id, session.dst_as, session.src_port, findings)


def analyze_mitigation(sessions, updates, table, pre_margin_s=600, post_margin_s=3600,
                       baseline_origins=None, counters=None):
    """Analyze every session; returns (session, report) pairs in session order."""
    if counters is None:
        counters = Counter()
    results = []
    for session in sessions:
        report = analyze_session(session, updates, table, pre_margin_s, post_margin_s,
                                 baseline_origins, counters)
        counters["sessions_analyzed"] += 1
        if report.mitigated:
            counters["sessions_mitigated"] += 1
        results.append((session, report))
    return results
