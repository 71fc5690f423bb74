import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from cafda.errors import ConfigError
from cafda.mewma import (ChartConfig, ChartState, calibrate_h4, estimate_arl, hotelling_arl, monitor_stream,
                         update, with_threshold)

from oracles import chi2_threshold, mewma_t2_loop

NU = np.array([0.5, 0.2, 0.1])


def test_lambda_one_keeps_last_score(rng):
    cfg = ChartConfig(1.0, NU)
    state = ChartState.initial(3)
    for _ in range(4):
        xi = rng.normal(size=3)
        state = update(state, xi, cfg)
        np.testing.assert_array_equal(state.omega, xi)
    assert state.g == 4


def test_zero_stream_never_alarms():
    trace = monitor_stream(ChartConfig(0.2, NU, h4=1e-12), np.zeros((50, 3)))
    assert np.all(trace.t2 == 0)
    assert trace.run_length is None


def test_first_statistic_for_unit_standardized_scores():
    cfg = ChartConfig(0.3, NU)
    state = update(ChartState.initial(3), np.sqrt(NU), cfg)
    assert state.t2 == pytest.approx(1.53, abs=1e-12)


def test_statistics_match_scalar_loop(rng):
    xs = rng.normal(size=(30, 3)) * np.sqrt(NU)
    trace = monitor_stream(ChartConfig(0.25, NU), xs)
    np.testing.assert_allclose(trace.t2, mewma_t2_loop(xs.tolist(), 0.25, NU.tolist()), rtol=1e-12)
    np.testing.assert_array_equal(trace.g, np.arange(1, 31))


def test_dimension_mismatch():
    with pytest.raises(ConfigError):
        update(ChartState.initial(3), np.zeros(2), ChartConfig(0.3, NU))


@pytest.mark.parametrize("kw", [dict(lam=0.0), dict(lam=1.5), dict(variances=[1.0, 0.0]), dict(h4=-1.0)])
def test_invalid_chart_config(kw):
    args = dict(lam=0.3, variances=[1.0, 1.0], h4=1.0) | kw
    with pytest.raises(ConfigError):
        ChartConfig(**args)


def test_zero_threshold_alarms_immediately():
    trace = monitor_stream(ChartConfig(0.3, NU, h4=0.0), [np.array([0.1, 0.0, 0.0]), np.zeros(3)])
    assert trace.run_length == 1


def test_large_constant_scores_alarm_at_once():
    trace = monitor_stream(ChartConfig(0.1, NU, h4=15.0), np.full((5, 3), 100.0))
    assert trace.run_length == 1


def test_chart_continues_after_alarm():
    xs = np.vstack([np.full((3, 3), 5.0), np.zeros((20, 3))])
    trace = monitor_stream(ChartConfig(0.3, NU, h4=10.0), xs)
    assert trace.alarmed[:4].all()
    assert not trace.alarmed[-1]
    assert trace.alarm_days == [k + 1 for k in np.flatnonzero(trace.alarmed)]


def test_trace_csv(tmp_path):
    trace = monitor_stream(ChartConfig(0.3, NU, h4=1.0), [np.sqrt(NU), np.zeros(3)])
    trace.write_csv(tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "g,day_id,T2,h4,alarmed"
    assert lines[1].split(",")[0] == "1" and lines[1].endswith(",1")
    assert len(lines) == 3


def test_calibrated_gaussian_chart_hits_target():
    cal = calibrate_h4(3, 0.2, 100, reps=20_000, seed=3)
    s = estimate_arl(ChartConfig(0.2, NU, h4=cal.h4), reps=10_000, seed=99)
    assert 95 <= s.arl <= 115


def test_hotelling_arl_at_published_threshold():
    s = estimate_arl(ChartConfig(1.0, np.ones(4), h4=16.25), reps=10_000, seed=5)
    assert abs(s.arl - 370.4) < 3 * s.se
    assert hotelling_arl(16.25, 4) == pytest.approx(370.4, rel=0.01)


@pytest.mark.parametrize("h", [5.0, 10.0, 16.25])
def test_hotelling_closed_form(h):
    s = estimate_arl(ChartConfig(1.0, np.ones(4), h4=h), reps=10_000, seed=int(h * 4))
    assert abs(s.arl - 1.0 / stats.chi2.sf(h, 4)) < 3 * s.se


def test_huge_shift_gives_run_length_one():
    s = estimate_arl(ChartConfig(0.3, NU, h4=15.0), shift=(0, 1e4), reps=1000, seed=0)
    assert s.arl == 1.0
    assert np.all(s.run_lengths == 1)


def test_larger_shift_detected_sooner():
    cfg = ChartConfig(0.3, NU, h4=calibrate_h4(3, 0.3, 100, reps=20_000, seed=2).h4)
    one = estimate_arl(cfg, shift=(1, 1 * np.sqrt(NU[1])), reps=10_000, seed=7)
    two = estimate_arl(cfg, shift=(1, 2 * np.sqrt(NU[1])), reps=10_000, seed=8)
    assert two.arl + 3 * np.hypot(one.se, two.se) < one.arl


def test_arl_is_reproducible():
    cfg = ChartConfig(0.3, NU, h4=12.0)
    a = estimate_arl(cfg, reps=2000, seed=11)
    b = estimate_arl(cfg, reps=2000, seed=11)
    np.testing.assert_array_equal(a.run_lengths, b.run_lengths)
    assert a.reps == 2000 and a.arl >= 1


def test_censoring_is_reported():
    s = estimate_arl(ChartConfig(0.3, NU, h4=1e6), reps=100, seed=0, max_steps=50)
    assert s.censored == 100
    assert s.arl == 50


def test_single_component_threshold_matches_chi_square():
    cal = calibrate_h4(1, 1.0, 370.4, reps=50_000, seed=4)
    assert cal.h4 == pytest.approx(chi2_threshold(370.4, 1), rel=0.02)
    assert chi2_threshold(370.4, 1) == pytest.approx(9.00, rel=0.02)


def test_calibration_deterministic():
    a = calibrate_h4(2, 0.5, 50, reps=5000, seed=9)
    b = calibrate_h4(2, 0.5, 50, reps=5000, seed=9)
    assert a == b


@pytest.mark.parametrize("args", [(2, 0.0, 100), (2, 1.2, 100), (2, 0.5, 1.0), (0, 0.5, 100)])
def test_calibration_rejects_bad_arguments(args):
    with pytest.raises(ConfigError):
        calibrate_h4(*args, reps=1000)


def test_with_threshold():
    cfg = with_threshold(ChartConfig(0.3, NU), 7.5)
    assert cfg.h4 == 7.5 and cfg.lam == 0.3


@given(st.floats(0.01, 100), st.floats(0.05, 1.0), st.integers(0, 1000))
def test_scale_invariance(c, lam, seed):
    xs = np.random.default_rng(seed).normal(size=(20, 3)) * np.sqrt(NU)
    a = monitor_stream(ChartConfig(lam, NU), xs).t2
    b = monitor_stream(ChartConfig(lam, NU * c * c), xs * c).t2
    np.testing.assert_allclose(a, b, rtol=1e-10)


@given(st.permutations([0, 1, 2]), st.integers(0, 1000))
def test_permutation_invariance(perm, seed):
    xs = np.random.default_rng(seed).normal(size=(20, 3)) * 1.5
    a = monitor_stream(ChartConfig(0.3, NU, h4=8.0), xs)
    b = monitor_stream(ChartConfig(0.3, NU[perm], h4=8.0), xs[:, perm])
    np.testing.assert_allclose(a.t2, b.t2, rtol=1e-12)
    np.testing.assert_array_equal(a.alarmed, b.alarmed)
