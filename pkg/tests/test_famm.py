import datetime as dt
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cafda import simgen
from cafda.dataset import DayProfile, FunctionalDataset
from cafda.errors import EmptyDataError, SpecError
from cafda.famm import (DAY_OF_YEAR, TIME, ModelSpec, TermDesign, build_design, fit_penalized, fit_stage1,
                        fit_stage2, parse_term, predict_fixed, r_squared)
from cafda.fpca import EigenSystem, day_grid
from cafda.pipeline import train

HOURS = np.arange(1.0, 25.0)


def _dataset(fn, n_days=40, seed=0, noise=0.0):
    """Days on the hourly grid with covariate ``z`` and output ``fn(t, z)``."""
    rng = np.random.default_rng(seed)
    profiles = []
    for d in range(1, n_days + 1):
        z = rng.uniform(0, 10) + np.sin(HOURS / 4 + d)
        u = fn(HOURS, z) + noise * rng.normal(size=24)
        profiles.append(DayProfile(d, HOURS, u, {"z": z}))
    return FunctionalDataset(tuple(profiles), ("z",))


@pytest.mark.parametrize("text, kind, variables, k", [
    ("constant_intercept", "constant_intercept", (), None),
    ("functional_intercept(t)", "functional_intercept", ("t",), None),
    ("functional_intercept", "functional_intercept", ("t",), None),
    ("seasonal_intercept(t, d)", "seasonal_intercept", ("t", "d"), None),
    ("smooth(temp, k=12)", "smooth", ("temp",), 12),
    ("s(temp)", "smooth", ("temp",), None),
    ("interaction(temp, humidity)", "interaction_smooth", ("temp", "humidity"), None),
    ("varying_smooth(temp, t)", "varying_smooth", ("temp", "t"), None),
    ("linear(rh)", "linear", ("rh",), None),
])
def test_parse_term(text, kind, variables, k):
    term = parse_term(text)
    assert (term.kind, term.variables, term.k) == (kind, variables, k)
    assert parse_term(str(term)) == term


@pytest.mark.parametrize("text", ["wiggly(temp)", "smooth()", "smooth(a, b)", "smooth(x, q=3)",
                                  "historical(temp)", "functional_intercept(temp)", "smooth(x, k=abc)", "1x"])
def test_bad_terms(text):
    with pytest.raises(SpecError):
        parse_term(text)


def test_spec_needs_single_constant():
    with pytest.raises(SpecError):
        ModelSpec(("smooth(z)",))
    with pytest.raises(SpecError):
        ModelSpec(("constant_intercept", "smooth(z)", "smooth(z)"))


def test_spec_with_unknown_covariate():
    ds = _dataset(lambda t, z: z)
    with pytest.raises(SpecError):
        build_design(ModelSpec(("constant_intercept", "smooth(temp)")), ds)


def test_constant_only_design_is_ones():
    ds = _dataset(lambda t, z: z)
    designs, y = build_design(ModelSpec(("constant_intercept",)), ds)
    assert len(designs) == 1
    np.testing.assert_array_equal(designs[0].X, np.ones((y.size, 1)))


def test_centering_drops_one_column():
    ds = _dataset(lambda t, z: z)
    designs, _ = build_design(ModelSpec(("constant_intercept", "smooth(z)")), ds)
    assert [d.X.shape[1] for d in designs] == [1, 9]


def test_fixture_design_shape(fixture_data):
    ds, _ = fixture_data
    designs, y = build_design(ModelSpec(("constant_intercept", "functional_intercept(t)", "smooth(z)")), ds)
    assert y.size == 7200
    assert [d.X.shape for d in designs] == [(7200, 1), (7200, 9), (7200, 9)]
    for d in designs[1:]:
        assert abs(d.X.sum(axis=0)).max() < 1e-8


def test_single_intercept_gives_mean(rng):
    y = rng.normal(3.0, 1.0, 57)
    designs = [TermDesign(None, np.ones((57, 1)))]
    fit = fit_penalized(designs, y)
    assert fit.coefficients[0][0] == pytest.approx(y.mean(), abs=1e-12)


def test_noiseless_linear_target_recovered():
    z = np.linspace(0, 10, 200)
    days = [DayProfile(1, np.linspace(0.1, 24, 200), 2 * z, {"z": z})]
    ds = FunctionalDataset(tuple(days), ("z",))
    spec = ModelSpec(("constant_intercept", "smooth(z)"))
    designs, y = build_design(spec, ds)
    fit = fit_penalized(designs, y)
    term = designs[1].X @ fit.coefficients[1]
    np.testing.assert_allclose(term, 2 * z - np.mean(2 * z), atol=1e-3)


def test_huge_smoothing_reaches_penalty_null_space(rng):
    """As lambda grows the basis coefficients become linear in their index."""
    z = np.sort(rng.uniform(0, 10, 300))
    ds = FunctionalDataset((DayProfile(1, np.linspace(0.05, 24, 300), np.sin(z) + rng.normal(0, 0.1, 300),
                                       {"z": z}),), ("z",))
    designs, y = build_design(ModelSpec(("constant_intercept", "smooth(z)")), ds)
    rough = []
    for lam in (1.0, 1e3, 1e6, 1e9):
        gamma = designs[1].basis.full_coef(fit_penalized(designs, y, lambdas=[lam]).coefficients[1])
        rough.append(np.abs(np.diff(gamma, 2)).max() / np.abs(gamma).max())
    assert rough == sorted(rough, reverse=True)
    assert rough[-1] < 1e-5


def test_stage1_noiseless_residuals_vanish():
    ds = _dataset(lambda t, z: 1.0 + np.sin(np.pi * t / 12) + 0.3 * z)
    s1 = fit_stage1(ModelSpec(("constant_intercept", "functional_intercept(t)", "smooth(z)")), ds)
    assert np.abs(np.concatenate(s1.residuals.values)).max() < 1e-3


def test_stage1_residual_variance_matches_dgp(fixture_data, dgp):
    ds, _ = fixture_data
    s1 = fit_stage1(ModelSpec(simgen.BASIC_SPEC), ds)
    expected = sum(dgp.eigenvalues) / 24.0 + dgp.sigma2
    assert s1.residual_variance() == pytest.approx(expected, rel=0.1)


def test_dropping_covariate_term_inflates_residuals(fixture_data):
    ds, _ = fixture_data
    full = fit_stage1(ModelSpec(simgen.BASIC_SPEC), ds).residual_variance()
    reduced = fit_stage1(ModelSpec(("constant_intercept", "functional_intercept(t)")), ds).residual_variance()
    assert reduced > full


def _degenerate_eig():
    g = day_grid()
    return EigenSystem(g, np.zeros((0, g.size)), np.zeros(0), 0.1)


def test_stage2_without_components_is_stage1(fixture_data):
    ds, _ = fixture_data
    spec = ModelSpec(simgen.BASIC_SPEC)
    s1 = fit_stage1(spec, ds)
    model = fit_stage2(spec, ds, _degenerate_eig(), s1)
    for a, b in zip(model.coefficients, s1.fit.coefficients):
        np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-8)


def test_stage2_large_variances_give_per_day_regression(fixture_model, fixture_data):
    ds, _ = fixture_data
    spec = fixture_model.spec
    eig = fixture_model.eigensystem
    loose = EigenSystem(eig.grid, eig.eigenfunctions, np.full(eig.m, 1e9), eig.sigma2)
    model = fit_stage2(spec, ds, loose)
    day = ds.profiles[7]
    cols = {TIME: day.t, DAY_OF_YEAR: np.full(24, day.d), "z": day.covariates["z"]}
    resid = day.u - model.predict_columns(cols)
    Z = loose.evaluate(day.t)
    ls = np.linalg.lstsq(Z, resid, rcond=None)[0]
    np.testing.assert_allclose(model.scores[day.day_id], ls, atol=1e-5)


def test_predict_constant_model():
    ds = _dataset(lambda t, z: 2.0 + 0 * z, noise=0.1)
    model = train(ModelSpec(("constant_intercept",)), ds)
    pred = predict_fixed(model, ds.profiles[0])
    np.testing.assert_allclose(pred.values, model.alpha0)


def test_identical_covariates_identical_predictions(fixture_model, fixture_data):
    ds, _ = fixture_data
    a = ds.profiles[3]
    b = DayProfile(999, a.t, a.u + 10.0, dict(a.covariates), a.d)
    np.testing.assert_array_equal(predict_fixed(fixture_model, a).values, predict_fixed(fixture_model, b).values)


def test_prediction_at_constant_covariate(fixture_model, dgp):
    day = DayProfile(1, HOURS, np.zeros(24), {"z": np.full(24, 5.0)})
    pred = predict_fixed(fixture_model, day).values
    truth = simgen.fixed_part(dgp, HOURS, np.full(24, 5.0))
    assert np.abs(pred - truth).max() < 0.15


def test_prediction_skips_missing_covariates(fixture_model):
    z = np.full(24, 5.0)
    z[3] = np.nan
    pred = predict_fixed(fixture_model, DayProfile(1, HOURS, np.zeros(24), {"z": z}))
    assert pred.values.size == 23
    np.testing.assert_array_equal(pred.skipped, [4.0])


def test_r_squared_perfect_fit():
    ds = _dataset(lambda t, z: 1.0 + 0.5 * z)
    model = train(ModelSpec(("constant_intercept", "linear(z)")), ds)
    assert r_squared(model, ds) == pytest.approx(1.0, abs=1e-9)


def test_r_squared_constant_only_least_squares_is_zero():
    noisy = _dataset(lambda t, z: 1.0 + 0.5 * z, noise=0.3)
    spec = ModelSpec(("constant_intercept",))
    model = fit_stage2(spec, noisy, _degenerate_eig())
    assert r_squared(model, noisy) == pytest.approx(0.0, abs=1e-10)


def test_r_squared_constant_only_gls_near_zero():
    noisy = _dataset(lambda t, z: 1.0 + 0.5 * z, noise=0.3)
    assert abs(r_squared(train(ModelSpec(("constant_intercept",)), noisy), noisy)) < 0.01


def test_r_squared_on_fixture(fixture_model, fixture_data):
    assert 0.3 < r_squared(fixture_model, fixture_data[0]) < 0.9


def test_r_squared_across_seeds(dgp):
    values = []
    for seed in range(10):
        ds = simgen.generate_phase1(replace(dgp, seed=seed))
        values.append(r_squared(train(ModelSpec(simgen.BASIC_SPEC), ds), ds))
    assert all(0.3 < v < 0.95 for v in values)
    assert np.ptp(values) < 0.2


def test_seasonal_intercept_with_dates(rng):
    start = dt.date(2019, 1, 1)
    profiles = []
    for k in range(120):
        day = start + dt.timedelta(days=3 * k)
        d = day.timetuple().tm_yday
        u = np.sin(2 * np.pi * d / 366) + np.cos(np.pi * HOURS / 12) + rng.normal(0, 0.2, 24)
        profiles.append(DayProfile(day, HOURS, u))
    ds = FunctionalDataset(tuple(profiles))
    model = train(ModelSpec(("constant_intercept", "seasonal_intercept(t, d)")), ds)
    assert model.diagnostics["r2"] > 0.5
    summer = predict_fixed(model, DayProfile(dt.date(2021, 4, 1), HOURS, np.zeros(24))).values
    truth = np.sin(2 * np.pi * 91 / 366) + np.cos(np.pi * HOURS / 12)
    assert np.abs(summer - truth).max() < 0.4


def test_segments_get_own_eigensystems(fixture_data):
    ds, _ = fixture_data
    model = train(ModelSpec(simgen.BASIC_SPEC, segments=(151,)), ds)
    assert len(model.eigensystems) == 2
    assert model.eigensystem_for(10) is model.eigensystems[0]
    assert model.eigensystem_for(200) is model.eigensystems[1]


def test_segment_without_days_rejected(fixture_data):
    ds, _ = fixture_data
    with pytest.raises(EmptyDataError):
        train(ModelSpec(simgen.BASIC_SPEC, segments=(10_000,)), ds)


@given(st.floats(-5, 5), st.floats(0.1, 3))
def test_prediction_is_affine_in_linear_response(a, b):
    """Scaling and shifting the output scales and shifts the fixed effects."""
    ds = _dataset(lambda t, z: np.cos(t / 4) + 0.2 * z, n_days=12, noise=0.05)
    spec = ModelSpec(("constant_intercept", "functional_intercept(t)", "linear(z)"))
    base = fit_stage1(spec, ds)
    moved = FunctionalDataset(tuple(DayProfile(p.day_id, p.t, a + b * p.u, p.covariates) for p in ds), ("z",))
    s = fit_stage1(spec, moved)
    np.testing.assert_allclose(s.fit.coefficients[0], a + b * base.fit.coefficients[0], rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(s.fit.coefficients[2], b * base.fit.coefficients[2], rtol=1e-6, atol=1e-6)
