"""Selective filter rules derived from DRDoS alerts.

Each rule discards UDP traffic from one source AS's prefixes on the abused
reflection port toward the victim's prefixes. Rules live as long as their
attack session and are withdrawn when it ends.
"""
import ipaddress
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Optional

import structlog

from errors import ConfigError
from stages.asn_map import UNMAPPED_AS
from stages.base import Stage
from stages.detection import DrdosAlert, SessionClosed

logger = structlog.get_logger(__name__)

ACTIVE = "active"
WITHDRAWN = "withdrawn"
SKIPPED = "skipped"


@dataclass
class FilterRule:
    rule_id: str
    session_id: str
    src_as: int
    dst_as: int
    src_port: int
    src_prefixes: list
    dst_prefixes: list
    protocol: str = "udp"
    action: str = "discard"
    state: str = ACTIVE
    created_at: Optional[int] = None
    updated_at: Optional[int] = None
    withdrawn_at: Optional[int] = None

    def to_dict(self):
        return {
            "rule_id": self.rule_id,
            "session_id": self.session_id,
            "state": self.state,
            "action": self.action,
            "match": {
                "src_prefixes": list(self.src_prefixes),
                "dst_prefixes": list(self.dst_prefixes),
                "protocol": self.protocol,
                "src_port": self.src_port,
            },
            "src_as": self.src_as,
            "dst_as": self.dst_as,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
            "withdrawn_at": self.withdrawn_at,
        }


@dataclass(frozen=True)
class SkippedRule:
    """A top contributor that could not be turned into a rule."""

    session_id: str
    src_as: int
    dst_as: int
    src_port: int
    reason: str
    at: int

    def to_dict(self):
        return {
            "state": SKIPPED,
            "session_id": self.session_id,
            "src_as": self.src_as,
            "dst_as": self.dst_as,
            "src_port": self.src_port,
            "reason": self.reason,
            "at": self.at,
        }


@dataclass
class RuleStore:
    rules: dict = field(default_factory=dict)
    by_session: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)

    def active(self):
        return [r for r in self.rules.values() if r.state == ACTIVE]


def _sorted_prefixes(prefixes):
    return sorted(prefixes, key=ipaddress.IPv4Network)


def top_contributors(alert, top_n=None):
    """Source ASes by descending bytes, ascending AS number on ties."""
    ranked = sorted(alert.source_breakdown, key=lambda item: (-item[1], item[0]))
    return ranked if top_n is None else ranked[:top_n]


def rules_from_alert(alert, table, top_n=None, store=None):
    """Derive (or refresh) the filter rules for one alert.

    Args:
        alert: A DrdosAlert carrying its session_id.
        table: PrefixTable used for reverse lookups of source and victim AS.
        top_n: Only the top_n contributors get a rule; None means all.
        store: RuleStore updated in place. Rules already present for the
            session are refreshed, never duplicated.

    Returns:
        The rules covering this alert's contributors, in contributor order.
    """
    if top_n is not None and top_n < 1:
        raise ConfigError(f"top_n must be >= 1, got {top_n}")
    if store is None:
        store = RuleStore()
    session_id = alert.session_id or f"{alert.dst_as}-{alert.src_port}-{alert.interval}"
    ids = store.by_session.setdefault(session_id, [])
    dst_prefixes = _sorted_prefixes(table.reverse(alert.dst_as))

    rules = []
    for asn, _ in top_contributors(alert, top_n):
        rule_id = f"{session_id}/as{asn}"
        rule = store.rules.get(rule_id)
        if rule is not None:
            rule.updated_at = alert.interval
            rules.append(rule)
            continue

        src_prefixes = _sorted_prefixes(table.reverse(asn)) if asn != UNMAPPED_AS else []
        reason = None
        if not src_prefixes:
            reason = "source AS has no known prefixes"
        elif not dst_prefixes:
            reason = "victim AS has no known prefixes"
        if reason:
            if (session_id, asn) not in store.skipped:
                store.skipped[(session_id, asn)] = SkippedRule(
                    session_id, asn, alert.dst_as, alert.src_port, reason, alert.interval)
                logger.warning("filter rule skipped", session_id=session_id, src_as=asn, reason=reason)
            continue

        rule = FilterRule(
            rule_id=rule_id,
            session_id=session_id,
            src_as=asn,
            dst_as=alert.dst_as,
            src_port=alert.src_port,
            src_prefixes=src_prefixes,
            dst_prefixes=dst_prefixes,
            created_at=alert.interval,
            updated_at=alert.interval,
        )
        store.rules[rule_id] = rule
        ids.append(rule_id)
        rules.append(rule)
    return rules


def withdraw_for_session(session_id, store, at=None):
    """Withdraw every active rule of a session. Returns the rules withdrawn now."""
    ids = store.by_session.get(session_id)
    if ids is None:
        logger.warning("withdrawal for unknown session", session_id=session_id)
        return []
    withdrawn = []
    for rule_id in ids:
        rule = store.rules[rule_id]
        if rule.state == ACTIVE:
            rule.state = WITHDRAWN
            rule.withdrawn_at = at
            withdrawn.append(rule)
    return withdrawn


def render_text(rule):
    """One line per rule: discard udp src <prefixes> sport <p> dst <prefixes>."""
    line = (f"{rule.action} {rule.protocol} src {','.join(rule.src_prefixes)} "
            f"sport {rule.src_port} dst {','.join(rule.dst_prefixes)}")
    if rule.state == WITHDRAWN:
        return f"# withdrawn {rule.rule_id}: {line}"
    return line


def render_exabgp(rule):
    """ExaBGP-style flow routes, one per (source prefix, victim prefix) pair."""
    verb = "withdraw" if rule.state == WITHDRAWN else "announce"
    blocks = []
    for src in rule.src_prefixes:
        for dst in rule.dst_prefixes:
            blocks.append(
                f"{verb} flow route {{\n"
                f"    match {{\n"
                f"        source {src};\n"
                f"        destination {dst};\n"
                f"        protocol {rule.protocol};\n"
                f"        source-port ={rule.src_port};\n"
                f"    }}\n"
                f"    then {{\n"
                f"        {rule.action};\n"
                f"    }}\n"
                f"}}"
            )
    return "\n".join(blocks)


class RuleGenerator(Stage):
    """Consumes alerts and closed sessions; emits rule lifecycle records."""

    def __init__(self, table, top_n=None):
        super().__init__()
        if top_n is not None and top_n < 1:
            raise ConfigError(f"top_n must be >= 1, got {top_n}")
        self.table = table
        self.top_n = top_n
        self.store = RuleStore()

    @property
    def name(self):
        return "flowspec"

    def process(self, event):
        if isinstance(event, DrdosAlert):
            known = set(self.store.rules)
            known_skips = set(self.store.skipped)
            rules = rules_from_alert(event, self.table, self.top_n, self.store)
            new = [replace(r) for r in rules if r.rule_id not in known]
            skips = [s for k, s in self.store.skipped.items() if k not in known_skips]
            self.counters["rules_created"] += len(new)
            self.counters["rules_skipped"] += len(skips)
            return new + skips
        if isinstance(event, SessionClosed):
            session = event.session
            withdrawn = withdraw_for_session(session.session_id, self.store, at=session.end)
            self.counters["rules_withdrawn"] += len(withdrawn)
            return [replace(r) for r in withdrawn]
        return []

    def flush(self):
        return []

    def summary(self):
        states = Counter(r.state for r in self.store.rules.values())
        return dict(states)


def replay_rule_log(alerts, sessions, table, top_n=None):
    """Run the generator over an alert log merged with a session log.

    Events are ordered by time; at equal times alerts come before session
    terminations.

    Returns:
        (generator, emitted records)
    """
    events = [(a.interval, 0, a) for a in alerts]
    events += [(s.end, 1, SessionClosed(s)) for s in sessions if s.end is not None]
    events.sort(key=lambda item: (item[0], item[1]))

    generator = RuleGenerator(table, top_n)
    out = []
    for _, _, event in events:
        out.extend(generator.process(event))
    return generator, out
