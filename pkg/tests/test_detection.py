"""
Tests for the EWMA model, the alert gates, sessions and multi-vector grouping.
"""
import math

import numpy as np
import pytest
from conftest import sketch

from errors import ConfigError, ContractViolation
from stages.detection import (
    MAX_FINALIZE_DELAY_INTERVALS, AnomalyEnded, AnomalyLog, AttackSession, DetectorConfig, DrdosAlert,
    DrdosDetector, EwmaModel, SessionClosed, SessionFinalized, correlate_multivector, ewma_update,
    reference_trajectory, score, source_breakdown, source_entropy, step, trajectory, volume_gate,
)

MB = 1_000_000
CFG = DetectorConfig(warmup_intervals=2)


def even(total, n=4, first=1):
    return {first + i: total // n for i in range(n)}


def run(detector, series, port=123, dst_as=9, t0=60):
    out = []
    for i, b in enumerate(series):
        out.extend(detector.process(sketch(t0 + i * 60, even(b) if b else {}, port, dst_as)))
    return out


def of_type(events, cls):
    return [e for e in events if isinstance(e, cls)]


def test_ewma_fixed_point():
    """Test that a constant reading leaves a settled model unchanged."""
    model = ewma_update(EwmaModel(mu=100.0, var=0.0), 100, CFG)
    assert (model.mu, model.var) == (100.0, 0.0)


def test_ewma_hand_evaluated():
    """Test one update against the hand-computed mean and variance."""
    model = ewma_update(EwmaModel(mu=100.0, var=0.0), 200, CFG)
    assert model.mu == pytest.approx(110.0)
    assert model.var == pytest.approx(900.0)
    assert model.observed == 1


def test_ewma_converges_on_constant_input():
    """Test that the mean converges to a constant and the variance vanishes."""
    c = 7.0e6
    model = EwmaModel(mu=5 * c, var=c ** 2)
    for _ in range(100):
        model = ewma_update(model, c, CFG)
    assert abs(model.mu - c) / c < 1e-3
    assert model.var < 1e-6 * c ** 2


def test_ewma_update_rejects_frozen_model():
    """Test that a frozen model cannot be updated."""
    with pytest.raises(ContractViolation):
        ewma_update(EwmaModel(frozen=True), 1, CFG)


def test_score_of_zero_is_zero():
    """Test that an empty interval never scores."""
    assert score(EwmaModel(mu=5.0, var=4.0), 0, CFG).delta == 0.0


def test_cold_start_spike_saturates():
    """Test that a spike on an empty model scores close to one."""
    s = score(EwmaModel(), 10 ** 9, CFG)
    assert s.delta == pytest.approx(1.0)
    assert s.anomalous


def test_score_below_tau():
    """Test a hand-evaluated score that stays below the threshold."""
    s = score(EwmaModel(mu=1e6, var=0.0), 1.5e6, CFG)
    assert s.delta == pytest.approx(1 / 3)
    assert not s.anomalous


def test_golden_freeze_and_release():
    """Test the freeze, alert and release sequence over a three-interval spike."""
    detector = DrdosDetector(CFG)
    series = [MB] * 10 + [100 * MB] * 3 + [MB]
    events = run(detector, series)

    alerts = of_type(events, DrdosAlert)
    assert [a.interval for a in alerts] == [660, 720, 780]
    assert all(a.entropy == pytest.approx(1.0) for a in alerts)
    [closed] = of_type(events, SessionClosed)
    session = closed.session
    assert (session.start, session.end) == (660, 840)
    assert session.duration_minutes == 3.0
    assert session.alert_intervals == [660, 720, 780]
    assert session.session_id == "9-123-660"
    assert not session.truncated

    mu10 = MB * (1 - 0.9 ** 10)
    model = detector.models[(123, 9)]
    assert not model.frozen
    assert model.mu == pytest.approx(0.9 * mu10 + 0.1 * MB)
    assert model.last_interval == 840


def test_model_untouched_while_frozen():
    """Test that anomalous readings never reach the mean."""
    model = EwmaModel()
    for i in range(10):
        model, _ = step(model, sketch(60 * (i + 1), even(MB)), CFG)
    before = (model.mu, model.var)
    for i in range(10, 13):
        model, events = step(model, sketch(60 * (i + 1), even(100 * MB)), CFG)
        assert isinstance(events[0], DrdosAlert)
    assert model.frozen
    assert model.anomaly_start == 660
    assert (model.mu, model.var) == before
    model, events = step(model, sketch(840, even(MB)), CFG)
    assert events == [AnomalyEnded(9, 123, 660, 840)]


def test_all_zero_stream_has_no_events():
    """Test that a silent key never produces events."""
    assert run(DrdosDetector(CFG), [0] * 50) == []


def test_single_interval_session():
    """Test that one anomalous interval gives a one-minute session."""
    events = run(DrdosDetector(CFG), [MB] * 10 + [100 * MB] + [MB])
    [closed] = of_type(events, SessionClosed)
    assert closed.session.duration_minutes == 1.0
    assert len(of_type(events, DrdosAlert)) == 1


def test_out_of_order_interval_rejected():
    """Test that an interval older than the last one is a contract violation."""
    detector = DrdosDetector(CFG)
    detector.process(sketch(120, even(MB)))
    with pytest.raises(ContractViolation):
        detector.process(sketch(60, even(MB)))


def test_volume_gate_boundary():
    """Test that exactly the minimum rate passes and less fails."""
    assert volume_gate(sketch(0, {1: 37_500_000}), CFG)
    assert not volume_gate(sketch(0, {1: 30_000_000}), CFG)


def test_entropy_examples():
    """Test normalized entropy on even, single and skewed source splits."""
    assert source_entropy({1: 5, 2: 5, 3: 5, 4: 5}) == pytest.approx(1.0)
    assert source_entropy({1: 500}) == 0.0
    h = source_entropy({1: 90, 2: 5, 3: 5})
    expected = -(0.9 * math.log(0.9) + 2 * 0.05 * math.log(0.05)) / math.log(3)
    assert h == pytest.approx(expected)
    assert h <= CFG.entropy_h


def test_entropy_ignores_zero_contributors():
    """Test that a source with zero bytes does not count toward n."""
    assert source_entropy({1: 5, 2: 5, 3: 0}) == pytest.approx(1.0)


def test_low_volume_anomaly_is_logged():
    """Test that a spike under the minimum rate becomes a volume AnomalyLog."""
    events = run(DrdosDetector(CFG), [1000] * 10 + [30 * MB])
    [log] = events
    assert isinstance(log, AnomalyLog)
    assert log.failed_gate == "volume"
    assert log.session_id is None


def test_single_source_anomaly_is_logged():
    """Test that a one-source spike fails the entropy gate."""
    detector = DrdosDetector(CFG)
    run(detector, [MB] * 10)
    events = detector.process(sketch(660, {5: 100 * MB}))
    [log] = events
    assert log.failed_gate == "entropy"
    assert detector.open_sessions == {}
    assert detector.counters["anomaly_logs_entropy"] == 1


def test_source_breakdown_order():
    """Test the (bytes desc, AS asc) ordering of alert contributors."""
    assert source_breakdown({3: 10, 1: 10, 2: 50}) == [(2, 50), (1, 10), (3, 10)]


def test_alert_fields():
    """Test that an alert carries volume, entropy and the source breakdown."""
    events = run(DrdosDetector(CFG), [MB] * 10 + [120 * MB])
    [alert] = of_type(events, DrdosAlert)
    assert alert.volume_bps == pytest.approx(16e6)
    assert alert.bytes == 120 * MB
    assert [asn for asn, _ in alert.source_breakdown] == [1, 2, 3, 4]
    assert alert.session_id == "9-123-660"


def test_flush_truncates_open_sessions():
    """Test that sessions still open at end of input are closed and flagged."""
    detector = DrdosDetector(CFG)
    run(detector, [MB] * 10 + [100 * MB] * 2)
    closed, final = detector.flush()
    assert isinstance(closed, SessionClosed) and final == SessionFinalized(closed.session)
    assert closed.session.truncated
    assert closed.session.end == 720
    assert detector.open_sessions == {}


def session(port, start, end, dst_as=9):
    s = AttackSession.open(dst_as, port, start)
    s.close(end)
    return s


def test_overlapping_sessions_grouped():
    """Test that overlapping sessions on one destination form a group of two."""
    a, b = session(123, 5, 9), session(389, 7, 12)
    groups = correlate_multivector([a, b])
    assert list(groups) == ["mv-9-5"]
    assert a.multi_vector_group == b.multi_vector_group == "mv-9-5"


def test_disjoint_sessions_not_grouped():
    """Test that disjoint sessions stay ungrouped."""
    a, b = session(123, 5, 6), session(389, 8, 9)
    assert correlate_multivector([a, b]) == {}
    assert a.multi_vector_group is None


def test_touching_sessions_not_grouped():
    """Test that a session ending where another starts does not overlap it."""
    assert correlate_multivector([session(123, 5, 6), session(389, 6, 8)]) == {}


def test_other_destinations_not_grouped():
    """Test that overlap only counts on the same destination AS."""
    assert correlate_multivector([session(123, 5, 9), session(389, 7, 12, dst_as=10)]) == {}


def test_transitive_grouping():
    """Test that a chain of pairwise overlaps is one group."""
    a, b, c = session(123, 1, 4), session(389, 3, 7), session(53, 6, 9)
    groups = correlate_multivector([a, b, c])
    assert [len(m) for m in groups.values()] == [3]


def test_streaming_multivector_group():
    """Test that two overlapping attacks on one victim share a group id."""
    detector = DrdosDetector(CFG)
    base = [MB] * 10
    series_123 = base + [100 * MB] * 4 + [MB] * 4
    series_389 = base + [MB] * 2 + [100 * MB] * 4 + [MB] * 2
    events = []
    for i, (b123, b389) in enumerate(zip(series_123, series_389)):
        t = 60 * (i + 1)
        events.extend(detector.process(sketch(t, even(b123), 123)))
        events.extend(detector.process(sketch(t, even(b389), 389)))
    sessions = {e.session.src_port: e.session for e in of_type(events, SessionClosed)}
    assert (sessions[123].start, sessions[123].end) == (660, 900)
    assert (sessions[389].start, sessions[389].end) == (780, 1020)
    assert sessions[123].multi_vector_group == sessions[389].multi_vector_group == "mv-9-660"


def interleaved(detector, series_by_port, t0=60):
    """Feed several keys of dstAS 9 interval by interval; returns (t, event) pairs."""
    out = []
    n = len(next(iter(series_by_port.values())))
    for i in range(n):
        t = t0 + i * 60
        for port in sorted(series_by_port):
            b = series_by_port[port][i]
            out.extend((t, e) for e in detector.process(sketch(t, even(b) if b else {}, port)))
    return out


def test_late_alerting_sibling_joins_group():
    """Test that a key frozen under the volume floor and alerting later still groups with an earlier session."""
    detector = DrdosDetector(CFG)
    timed = interleaved(detector, {
        53: [MB] * 10 + [100 * MB] * 3 + [MB] * 5,
        123: [1000] * 10 + [1000] + [30 * MB] * 3 + [100 * MB] * 3 + [1000],
    })
    closed = {e.session.src_port: (t, e.session) for t, e in timed if isinstance(e, SessionClosed)}
    final = {e.session.src_port: t for t, e in timed if isinstance(e, SessionFinalized)}

    assert closed[53][0] == 840
    assert (closed[53][1].start, closed[53][1].end) == (660, 840)
    assert (closed[123][1].start, closed[123][1].end) == (720, 1080)
    assert closed[53][1].multi_vector_group == closed[123][1].multi_vector_group == "mv-9-660"
    assert final == {53: 900, 123: 1080}


def test_finalize_not_held_forever():
    """Test that a sibling frozen without alerting holds a session back only for a bounded time."""
    detector = DrdosDetector(CFG)
    n = 75
    timed = interleaved(detector, {
        53: [MB] * 10 + [100 * MB] * 3 + [MB] * (n - 13),
        123: [1000] * 11 + [30 * MB] * (n - 11),
    })
    [(t, final)] = [(t, e) for t, e in timed if isinstance(e, SessionFinalized)]
    assert t == 840 + MAX_FINALIZE_DELAY_INTERVALS * 60
    assert final.session.multi_vector_group is None


def test_lone_session_finalized_at_close():
    """Test that a session with no frozen siblings is final as soon as it closes."""
    events = run(DrdosDetector(CFG), [MB] * 10 + [100 * MB] + [MB])
    closed, final = events[-2:]
    assert isinstance(closed, SessionClosed)
    assert final == SessionFinalized(closed.session)


def test_startup_learns_existing_traffic():
    """Test that at default settings a key busy from the first interval learns its baseline."""
    detector = DrdosDetector(DetectorConfig())
    per_src = {asn: 5 * MB for asn in range(1, 11)}
    events = []
    for i in range(120):
        events.extend(detector.process(sketch(i * 60, per_src)))
    events.extend(detector.flush())
    assert events == []
    model = detector.models[(123, 9)]
    assert not model.frozen
    assert model.mu == pytest.approx(50 * MB, rel=1e-4)


def test_new_key_after_startup_alerts_at_once():
    """Test that a key first seen after the startup window still alerts in its first interval."""
    detector = DrdosDetector(DetectorConfig())
    run(detector, [10 * MB] * 15)
    [alert] = detector.process(sketch(780, even(100 * MB), 389))
    assert isinstance(alert, DrdosAlert)
    assert alert.session_id == "9-389-780"


def test_decayed_model_evicted():
    """Test that a key silent long enough is dropped and reported once."""
    evicted = []
    detector = DrdosDetector(CFG, on_evict=evicted.append)
    run(detector, [MB] * 10 + [0] * 300)
    assert evicted == [(123, 9)]
    assert (123, 9) not in detector.models
    assert detector.counters["models_evicted"] == 1


def spiky_series(seed, n=300):
    rng = np.random.Generator(np.random.PCG64(seed))
    series = rng.uniform(0.8, 1.2, size=n) * MB
    for start in rng.integers(20, n - 5, size=6):
        series[start:start + int(rng.integers(1, 5))] *= 50
    return [float(b) for b in series]


def test_streaming_matches_reference():
    """Test that the streaming model equals a from-scratch recomputation."""
    series = spiky_series(5)
    got = trajectory(series, CFG)
    want = reference_trajectory(series, CFG)
    assert [r["frozen"] for r in got] == [r["frozen"] for r in want]
    for g, w in zip(got, want):
        assert g["mu"] == pytest.approx(w["mu"], rel=1e-9, abs=1e-6)
        assert g["var"] == pytest.approx(w["var"], rel=1e-9, abs=1e-3)
        assert g["delta"] == pytest.approx(w["delta"], rel=1e-9, abs=1e-12)


def test_scale_covariance():
    """Test that scaling every reading by k leaves the decisions unchanged."""
    series = spiky_series(9)
    base = trajectory(series, CFG)
    scaled = trajectory([b * 1000 for b in series], CFG)
    assert [r["frozen"] for r in base] == [r["frozen"] for r in scaled]
    for r, s in zip(base, scaled):
        assert s["delta"] == pytest.approx(r["delta"], rel=1e-6, abs=1e-9)
        assert s["mu"] == pytest.approx(r["mu"] * 1000, rel=1e-9)


@pytest.mark.parametrize("field, value", [
    ("alpha", 1.0), ("theta", 0), ("tau", 1.0), ("epsilon", 0), ("nu_bps", -1),
    ("entropy_h", 1.0), ("delta_t", 0), ("warmup_intervals", -1), ("startup_intervals", -1),
])
def test_invalid_config(field, value):
    """Test that out-of-range parameters are rejected."""
    with pytest.raises(ConfigError):
        DetectorConfig(**{field: value}).validate()


def test_session_round_trip_keeps_duration():
    """Test that a serialized session reports its duration in minutes."""
    s = session(123, 600, 900)
    obj = s.to_dict()
    assert obj["duration_minutes"] == 5.0
    assert AttackSession.from_dict(obj).end == 900
