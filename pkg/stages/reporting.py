"""Offline statistics over session logs and sketch archives.

Everything here produces plot-ready tables (dicts, DataFrames, CSV), never
images.
"""
import datetime as dt
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import structlog

from errors import InputError
from stages.detection import AttackSession

logger = structlog.get_logger(__name__)

DAY = 86400
TOP_SOURCES = 10
ARCHIVE_COLUMNS = ["t", "src_port", "dst_as", "src_as", "bytes"]


def load_sessions(path):
    """Read a sessions JSONL log."""
    sessions = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    sessions.append(AttackSession.from_dict(json.loads(line)))
                except (ValueError, KeyError, TypeError) as e:
                    raise InputError(f"{path}:{line_no}: bad session record: {e}") from e
    except OSError as e:
        raise InputError(f"cannot read sessions {path}: {e}") from e
    return sessions


def empirical_cdf(values):
    """Return [(x, F(x))] over the distinct values, F ending at 1.0."""
    if len(values) == 0:
        return []
    xs, counts = np.unique(np.asarray(values, dtype=float), return_counts=True)
    cdf = np.cumsum(counts) / counts.sum()
    return [(float(x), float(f)) for x, f in zip(xs, cdf)]


def cdf_at(cdf, x):
    """Evaluate a step CDF from empirical_cdf at x."""
    f = 0.0
    for value, fraction in cdf:
        if value > x:
            break
        f = fraction
    return f


def box_stats(values):
    """Quartiles, whiskers (min/max) and mean of a sample."""
    a = np.asarray(values, dtype=float)
    q1, median, q3 = np.percentile(a, [25, 50, 75])
    return {
        "count": int(a.size),
        "min": float(a.min()),
        "q1": float(q1),
        "median": float(median),
        "q3": float(q3),
        "max": float(a.max()),
        "mean": float(a.mean()),
    }


@dataclass
class AttackStats:
    total: int = 0
    sessions: list = field(default_factory=list)
    duration_cdf: list = field(default_factory=list)
    peak_cdf: list = field(default_factory=list)
    source_count_cdf: list = field(default_factory=list)
    per_port_counts: dict = field(default_factory=dict)
    per_port_volume: dict = field(default_factory=dict)
    group_sizes: dict = field(default_factory=dict)
    top_sources: list = field(default_factory=list)

    def to_dict(self):
        return {
            "total": self.total,
            "duration_cdf": self.duration_cdf,
            "peak_cdf": self.peak_cdf,
            "source_count_cdf": self.source_count_cdf,
            "per_port_counts": {str(p): n for p, n in sorted(self.per_port_counts.items())},
            "per_port_volume": {str(p): v for p, v in sorted(self.per_port_volume.items())},
            "group_sizes": {str(size): n for size, n in sorted(self.group_sizes.items())},
            "top_sources": self.top_sources,
        }

    def tables(self):
        """The statistics as named DataFrames, one per CSV file."""
        return {
            "sessions": pd.DataFrame(self.sessions,
                                     columns=["session_id", "dst_as", "port", "duration_minutes",
                                              "peak_bps", "n_sources", "multi_vector_group"]),
            "duration_cdf": pd.DataFrame(self.duration_cdf, columns=["duration_minutes", "cdf"]),
            "peak_cdf": pd.DataFrame(self.peak_cdf, columns=["peak_bps", "cdf"]),
            "source_count_cdf": pd.DataFrame(self.source_count_cdf, columns=["n_sources", "cdf"]),
            "ports": pd.DataFrame(
                [{"port": p, "sessions": self.per_port_counts[p], **self.per_port_volume[p]}
                 for p in sorted(self.per_port_counts)],
                columns=["port", "sessions", "count", "min", "q1", "median", "q3", "max", "mean"]),
            "group_sizes": pd.DataFrame(sorted(self.group_sizes.items()), columns=["group_size", "groups"]),
            "top_sources": pd.DataFrame(
                self.top_sources,
                columns=["src_as", "attacks", "min", "q1", "median", "q3", "max", "mean"]),
        }


def top_sources(sessions, k=TOP_SOURCES):
    """Source ASes seen in the most attacks, with their per-attack peak contribution."""
    peaks = defaultdict(list)
    for s in sessions:
        for asn, bps in s.source_peaks.items():
            peaks[asn].append(bps)
    ranked = sorted(peaks.items(), key=lambda item: (-len(item[1]), item[0]))[:k]
    rows = []
    for asn, values in ranked:
        box = box_stats(values)
        rows.append({"src_as": asn, "attacks": box.pop("count"), **box})
    return rows


def compute_stats(sessions):
    """Distributions over a complete session log.

    An empty log gives explicit zero totals and empty tables.
    """
    sessions = [s for s in sessions if s.end is not None]
    if not sessions:
        return AttackStats()

    rows = [{
        "session_id": s.session_id,
        "dst_as": s.dst_as,
        "port": s.src_port,
        "duration_minutes": s.duration_minutes,
        "peak_bps": s.peak_volume_bps,
        "n_sources": s.n_sources,
        "multi_vector_group": s.multi_vector_group,
    } for s in sessions]

    by_port = defaultdict(list)
    for s in sessions:
        by_port[s.src_port].append(s.peak_volume_bps)

    group_members = Counter(s.multi_vector_group for s in sessions if s.multi_vector_group)
    group_sizes = Counter(group_members.values())

    return AttackStats(
        total=len(sessions),
        sessions=rows,
        duration_cdf=empirical_cdf([s.duration_minutes for s in sessions]),
        peak_cdf=empirical_cdf([s.peak_volume_bps for s in sessions]),
        source_count_cdf=empirical_cdf([s.n_sources for s in sessions]),
        per_port_counts={p: len(v) for p, v in by_port.items()},
        per_port_volume={p: box_stats(v) for p, v in by_port.items()},
        group_sizes=dict(group_sizes),
        top_sources=top_sources(sessions),
    )


def write_stats(stats, out_dir):
    """Write every stats table as <name>.csv under out_dir."""
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, frame in stats.tables().items():
        frame.to_csv(out_dir / f"{name}.csv", index=False)


def load_sketch_archive(path):
    """Read a sketch archive into one row per (interval, port, dstAS, srcAS)."""
    records = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    t, port, dst = int(obj["t"]), int(obj["src_port"]), int(obj["dst_as"])
                    per_src = obj.get("per_src", {})
                except (ValueError, KeyError, TypeError) as e:
                    raise InputError(f"{path}:{line_no}: bad sketch record: {e}") from e
                if not per_src:
                    records.append((t, port, dst, None, 0))
                for asn, b in per_src.items():
                    records.append((t, port, dst, int(asn), int(b)))
    except OSError as e:
        raise InputError(f"cannot read sketch archive {path}: {e}") from e
    frame = pd.DataFrame.from_records(records, columns=ARCHIVE_COLUMNS)
    frame["src_as"] = frame["src_as"].astype("Int64")
    return frame


def _day_of(series):
    return pd.to_datetime(series, unit="s", utc=True).dt.date


def _days(day_from, day_to):
    return [day_from + dt.timedelta(days=i) for i in range((day_to - day_from).days + 1)]


def attack_mask(frame, sessions, dst_as, port):
    """True for archive rows inside a session of the key.

    A session covers [start, end); a truncated session also covers its end.
    """
    mask = pd.Series(False, index=frame.index)
    for s in sessions:
        if s.dst_as != dst_as or s.src_port != port or s.end is None:
            continue
        upper = frame["t"] <= s.end if s.truncated else frame["t"] < s.end
        mask |= (frame["t"] >= s.start) & upper
    return mask


@dataclass
class TrafficMatrix:
    frame: pd.DataFrame
    excluded_bytes: int
    total_bytes: int


def traffic_matrix(archive, sessions, dst_as, port, day_from, day_to, src_sample=None):
    """Daily MBytes per source AS toward one (dstAS, port), attack intervals excluded.

    Args:
        archive: DataFrame from load_sketch_archive.
        sessions: Sessions whose intervals are excluded.
        dst_as, port: The key.
        day_from, day_to: Inclusive UTC date range.
        src_sample: Rows to report; default every source AS seen for the key.

    Raises:
        InputError: The archive has no data for some day of the range.
    """
    days = _days(day_from, day_to)
    archived_days = set(_day_of(archive["t"])) if len(archive) else set()
    missing = [d for d in days if d not in archived_days]
    if missing:
        raise InputError("sketch archive does not cover: " + ", ".join(d.isoformat() for d in missing))

    key = archive[(archive["dst_as"] == dst_as) & (archive["src_port"] == port)].copy()
    key["day"] = _day_of(key["t"])
    key = key[key["day"].isin(days) & key["src_as"].notna()]
    key = key.astype({"src_as": "int64"})
    excluded = attack_mask(key, sessions, dst_as, port)
    kept = key[~excluded]

    rows = sorted(int(a) for a in key["src_as"].unique()) if src_sample is None else list(src_sample)
    cells = kept.groupby(["src_as", "day"])["bytes"].sum() / 1e6
    frame = cells.unstack(fill_value=0.0) if len(cells) else pd.DataFrame()
    frame = frame.reindex(index=rows, columns=days, fill_value=0.0).astype(float)
    frame.index.name = "src_as"
    frame.columns = [d.isoformat() for d in days]
    return TrafficMatrix(frame, int(key.loc[excluded, "bytes"].sum()), int(key["bytes"].sum()))


def sample_sources(archive, dst_as, port, n, seed=0):
    """A reproducible random choice of n source ASes seen for the key."""
    key = archive[(archive["dst_as"] == dst_as) & (archive["src_port"] == port)]
    candidates = np.array(sorted(int(a) for a in key["src_as"].dropna().unique()), dtype=np.int64)
    if candidates.size <= n:
        return [int(a) for a in candidates]
    rng = np.random.Generator(np.random.PCG64(seed))
    return sorted(int(a) for a in rng.choice(candidates, size=n, replace=False))


def attack_timeline(archive, session, margin_s=1800):
    """Per-source bytes per interval around one session, margin_s on each side."""
    end = session.end if session.end is not None else session.start
    key = archive[(archive["dst_as"] == session.dst_as) & (archive["src_port"] == session.src_port)]
    window = key[(key["t"] >= session.start - margin_s) & (key["t"] <= end + margin_s)]
    window = window[window["src_as"].notna()]
    if window.empty:
        return pd.DataFrame()
    timeline = window.pivot_table(index="t", columns="src_as", values="bytes",
                                  aggfunc="sum", fill_value=0)
    timeline.columns = [int(c) for c in timeline.columns]
    return timeline


def collateral_estimate(matrix, src_ases):
    """Mean non-attack MB/day a per-source filter would also have dropped."""
    frame = matrix.frame.reindex(index=list(src_ases), fill_value=0.0)
    return frame.mean(axis=1).rename("mean_mb_per_day")
