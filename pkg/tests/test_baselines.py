import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trendcast import baselines as bl
from trendcast.dataset import FashionElement
from trendcast.errors import InvalidArgumentError


def _ar1(n, phi=0.8, sigma=0.01, seed=0):
    rng = np.random.default_rng(seed)
    y = np.zeros(n)
    for t in range(1, n):
        y[t] = phi * y[t - 1] + sigma * rng.standard_normal()
    return y


def test_mean_last_examples():
    assert bl.forecast_mean([1, 2, 3], 2).tolist() == [2, 2]
    assert bl.forecast_last([1, 2, 3], 2).tolist() == [3, 3]
    assert np.allclose(bl.forecast_mean([0.1, 0.3], 3), 0.2, atol=1e-16)
    with pytest.raises(InvalidArgumentError):
        bl.forecast_mean([], 2)


def test_ar_recovers_coefficient():
    fit = bl.fit_ar(_ar1(200), 1)
    assert abs(fit.coefficients[1] - 0.8) <= 0.05


def test_ar_constant_and_order_zero():
    y = np.full(30, 0.37)
    f = bl.forecast_ar(bl.fit_ar(y, 3), y, 5)
    assert np.max(np.abs(f - 0.37)) <= 1e-6
    z = np.random.default_rng(1).normal(size=20)
    assert np.allclose(bl.forecast_ar(bl.fit_ar(z, 0), z, 4), z.mean(), atol=1e-12)


def test_ar_short_history():
    with pytest.raises(InvalidArgumentError):
        bl.fit_ar(np.ones(3), 4)


def test_var_k1_is_ar():
    y = _ar1(120, seed=2)
    ar = bl.forecast_ar(bl.fit_ar(y, 3), y, 6)
    var = bl.forecast_var(bl.fit_var(y[None, :], 3), y[None, :], 6)[0]
    assert np.max(np.abs(ar - var)) <= 1e-9


def test_var_diagonal_and_coupled_generators():
    rng = np.random.default_rng(3)
    n = 2000
    x, y = np.zeros(n), np.zeros(n)
    for t in range(1, n):
        x[t] = 0.6 * x[t - 1] + 0.1 * rng.standard_normal()
        y[t] = 0.3 * y[t - 1] + 0.5 * x[t - 1] + 0.1 * rng.standard_normal()
    C = np.asarray(bl.fit_var(np.stack([x, y]), 1).coefficients)   # rows [c, a_x, a_y]
    assert abs(C[1, 1] - 0.5) <= 0.05
    assert abs(C[0, 2]) <= 0.05
    z = np.zeros(n)
    for t in range(1, n):
        z[t] = -0.4 * z[t - 1] + 0.1 * rng.standard_normal()
    D = np.asarray(bl.fit_var(np.stack([x, z]), 1).coefficients)
    assert abs(D[0, 2]) <= 0.05 and abs(D[1, 1]) <= 0.05


def test_var_underdetermined_falls_back(caplog):
    caplog.set_level("INFO")
    Y = np.random.default_rng(0).normal(size=(4, 12))
    fit = bl.fit_var(Y, 4)
    assert fit.method == "var-ar" and "underdetermined" in caplog.text
    assert bl.forecast_var(fit, Y, 3).shape == (4, 3)


def test_es_limits():
    y = np.random.default_rng(4).normal(size=25)
    assert np.array_equal(bl.forecast_es(y, 4, alpha_grid=(1.0,)), bl.forecast_last(y, 4))
    for a in (0.1, 0.5, 1.0):
        assert bl.forecast_es(np.full(10, 0.4), 3, (a,)).tolist() == [0.4] * 3
    with pytest.raises(InvalidArgumentError):
        bl.fit_es(y, (0.0, 0.5))


def test_es_picks_one_on_random_walk():
    y = np.cumsum(np.random.default_rng(5).normal(size=200))
    assert bl.fit_es(y).coefficients[0] == 1.0


def test_linear_recovers_ramp():
    t = np.arange(40.0)
    fit = bl.fit_linear(0.3 + 0.01 * t)
    assert np.max(np.abs(np.array(fit.coefficients) - [0.3, 0.01])) <= 1e-9
    f = bl.forecast_curve(fit, 3, 1)
    assert np.allclose(f, 0.3 + 0.01 * np.arange(40, 43), atol=1e-12)


def test_cyclic_and_geostyle_on_sinusoid():
    P = 24
    t = np.arange(72.0)
    y = 0.5 + 0.2 * np.sin(2 * np.pi * t / P + 0.7)
    cyc = bl.fit_cyclic(y, P)
    resid = y - bl._curve_design("cyclic", t, P) @ np.array(cyc.coefficients)
    assert np.max(np.abs(resid)) < 1e-6
    geo = bl.fit_geostyle(y, P)
    assert abs(geo.coefficients[1]) < 1e-9
    f = bl.forecast_curve(geo, 5, P)
    assert np.allclose(f, 0.5 + 0.2 * np.sin(2 * np.pi * np.arange(72, 77) / P + 0.7), atol=1e-9)


def test_curve_respects_absolute_time():
    P = 12
    t = np.arange(100.0)
    y = np.cos(2 * np.pi * t / P)
    fit = bl.fit_cyclic(y[30:60], P, start=30)
    assert np.allclose(bl.forecast_curve(fit, 4, P), y[60:64], atol=1e-9)


def test_cyclic_needs_a_period():
    with pytest.raises(InvalidArgumentError):
        bl.fit_cyclic(np.ones(10), 24)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 0.99), st.sampled_from(["linear", "cyclic", "geostyle"]))
def test_flat_series_forecasts_constant(c, kind):
    fit = bl.fit_curve(kind, np.full(30, c), 12)
    assert np.allclose(bl.forecast_curve(fit, 4, 12), c, atol=1e-9)


def test_sibling_sets():
    els = [FashionElement("c", "category"), FashionElement("a", "attribute", "c"),
           FashionElement("b", "attribute", "c"), FashionElement("d", "category")]
    keys = [("g", "a"), ("g", "b"), ("g", "c"), ("g", "d"), ("h", "a")]
    sets = bl.sibling_sets(keys, els)
    assert sets[("g", "a")] == [("g", "a"), ("g", "b")]
    assert sets[("g", "c")] == [("g", "c")] and sets[("h", "a")] == [("h", "a")]


def test_forecast_samples_dispatch():
    from trendcast.dataset import prepare
    from trendcast.synth import default_config, synth_generate
    ds = synth_generate(default_config(), 0)
    prep = prepare(ds, 48, 18)
    test = prep.split.test[:12]
    sib = bl.sibling_sets(list(prep.values), ds.elements)
    for m in bl.METHODS:
        f = bl.forecast_samples(m, test, prep.values, 24, siblings=sib)
        assert f.shape == (12, 18) and np.all(np.isfinite(f))
    ref = np.stack([np.full(18, s.history.mean()) for s in test])
    assert np.array_equal(bl.forecast_samples("mean", test), ref)
    with pytest.raises(InvalidArgumentError):
        bl.forecast_samples("prophet", test)


def test_lstsq_ridge_fallback():
    X = np.ones((5, 2))
    coef = bl.lstsq(X, np.full(5, 2.0))
    assert np.allclose(X @ coef, 2.0, atol=1e-5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 20.0), st.floats(-3.0, 3.0),
       st.sampled_from(["mean", "last", "linear", "cyclic", "geostyle", "ar"]))
def test_affine_equivariance(seed, scale, shift, method):
    rng = np.random.default_rng(seed)
    y = rng.uniform(size=30)

    def run(h):
        if method == "mean":
            return bl.forecast_mean(h, 5)
        if method == "last":
            return bl.forecast_last(h, 5)
        if method == "ar":
            return bl.forecast_ar(bl.fit_ar(h, 2), h, 5)
        return bl.forecast_curve(bl.fit_curve(method, h, 12, start=7), 5, 12)
    direct = run(scale * y + shift)
    assert np.allclose(scale * run(y) + shift, direct, atol=1e-9 * max(1.0, scale), rtol=0)
