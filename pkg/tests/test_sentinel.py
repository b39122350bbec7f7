import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cavsentry.attacks import AttackSpec, Constant, Instant, inject_campaign
from cavsentry.sentinel import (
    KalmanState,
    SentinelConfig,
    SentinelError,
    fit_normal,
    kf_init,
    kf_step,
    malicious_set,
    read_verdicts,
    scan_channel,
    scan_for_malicious,
    write_verdicts,
)
from cavsentry.traces import SensorChannel, SynthProfile, TripTrace, synth_trace


def test_init():
    s = kf_init(10.0)
    assert (s.x, s.P) == (10.0, 1.0)
    assert kf_init(-3.5).x == -3.5
    assert kf_init(0.0, SentinelConfig(P0=4.0)).P == 4.0


def test_hand_step():
    s, pred = kf_step(KalmanState(10.0, P=1.0, Q=0.0, R=1.0), 12.0)
    assert pred == 10.0
    assert s.x == pytest.approx(11.0)
    assert s.P == pytest.approx(0.5)


def test_huge_R_ignores_measurement():
    s, _ = kf_step(KalmanState(10.0, 1.0, 0.0, 1e12), 50.0)
    assert s.x == pytest.approx(10.0, abs=1e-9)


def test_constant_stream_converges():
    s = KalmanState(7.0, 1.0, 0.01, 0.5)
    ps = []
    for _ in range(100):
        s, _ = kf_step(s, 7.0)
        ps.append(s.P)
        assert s.x == 7.0
    assert all(b <= a + 1e-15 for a, b in zip(ps, ps[1:]))
    # fixed point of P = (P+Q)R/(P+Q+R)
    q, r = 0.01, 0.5
    fixed = (-q + np.sqrt(q * q + 4 * q * r)) / 2
    assert ps[-1] == pytest.approx(fixed, rel=1e-6)


def test_non_finite_measurement():
    with pytest.raises(SentinelError):
        kf_step(KalmanState(0.0), float("nan"))


@settings(max_examples=100, deadline=None)
@given(st.floats(-100, 100), st.floats(1e-6, 1e3), st.floats(0, 10), st.floats(1e-6, 1e3), st.floats(-100, 100))
def test_gain_and_variance_properties(x, p, q, r, z):
    s, _ = kf_step(KalmanState(x, p, q, r), z)
    p_pred = p + q
    gain = p_pred / (p_pred + r)
    assert 0 < gain < 1 or np.isclose(gain, 1) or np.isclose(gain, 0)
    assert s.P <= p_pred


@settings(max_examples=30, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.01, 10), st.floats(0.01, 10))
def test_q_zero_monotone_approach(x0, c, p, r):
    s = KalmanState(x0, p, 0.0, r)
    gap = abs(s.x - c)
    for _ in range(30):
        s, _ = kf_step(s, c)
        assert abs(s.x - c) <= gap + 1e-12
        gap = abs(s.x - c)


def test_fit_normal_fanout():
    filters, hist = fit_normal(synth_trace(0, 300))
    assert len(filters) == 3 and len(hist) == 3
    assert {len(h) for h in hist} == {300}


def test_fit_constant_history_converges():
    tr = synth_trace(0, 100, SynthProfile(constant_speed=12.0, speed_noise=0, gps_noise=0))
    _, hist = fit_normal(tr)
    assert np.abs(hist[0][50:] - 12.0).max() < 1e-6


def test_fit_rejects_missing():
    with pytest.raises(SentinelError):
        fit_normal(None)


def test_threshold_flag():
    state = KalmanState(10.0, 1.0, 0.0, 1.0)
    v, _ = scan_channel(state, [10.0, 13.5], SentinelConfig(T=2.0))
    assert v.flagged
    assert v.flag_events[0].index == 1
    assert v.flag_events[0].abs_diff == pytest.approx(3.5)


def test_clean_trace_not_flagged():
    tr = synth_trace(3, 3000, SynthProfile(speed_noise=0, gps_noise=0))
    assert np.abs(np.diff(tr.matrix(), axis=1)).max() < 1.0
    filters, _ = fit_normal(tr)
    assert malicious_set(scan_for_malicious(filters, tr)) == []


def test_constant_attack_attributed():
    clean = synth_trace(5, 3000)
    dirty, log = inject_campaign(clean, [AttackSpec(Constant((3.2, 3.2)), 1, 0.03, 2)])
    filters, _ = fit_normal(clean)
    verdicts = scan_for_malicious(filters, dirty)
    assert malicious_set(verdicts) == [1]
    assert all(e.abs_diff > 2.0 for v in verdicts for e in v.flag_events)


def test_literal_always_update_mode():
    clean = synth_trace(5, 2000)
    dirty, _ = inject_campaign(clean, [AttackSpec(Constant((3.2, 3.2)), 0, 0.05, 2)])
    filters, _ = fit_normal(clean)
    coast = scan_for_malicious(filters, dirty, SentinelConfig())
    always = scan_for_malicious(filters, dirty, SentinelConfig(coast_on_flag=False))
    # coasting keeps the whole offset flagged; always-update only sees the edge
    assert len(coast[0].flag_events) > len(always[0].flag_events) > 0


def test_channel_count_mismatch():
    filters, _ = fit_normal(synth_trace(0, 50))
    with pytest.raises(SentinelError):
        scan_for_malicious(filters[:2], synth_trace(0, 50))


def test_verdict_export(tmp_path):
    clean = synth_trace(1, 1000)
    dirty, _ = inject_campaign(clean, [AttackSpec(Instant(), 2, 0.05, 4)])
    filters, _ = fit_normal(clean)
    verdicts = scan_for_malicious(filters, dirty)
    write_verdicts(verdicts, tmp_path / "v.csv")
    lines = (tmp_path / "v.csv").read_text().splitlines()
    assert lines[0] == "sensor,index,predicted,observed,abs_diff"
    assert lines[-1] == "# malicious: 2"
    back = read_verdicts(tmp_path / "v.csv", 3)
    assert [len(v.flag_events) for v in back] == [len(v.flag_events) for v in verdicts]
    for v in verdicts:
        assert v.flagged == bool(v.flag_events)
