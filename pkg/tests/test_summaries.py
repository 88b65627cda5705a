import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from ageifr.age_density import GRID, AgeDensity
from ageifr.data import AgeBin, DeathBinObs, SerologyBinObs
from ageifr.errors import (DegenerateTest, InsufficientDraws, ZeroInfections,
                           ZeroPrevalence)
from ageifr.model import positivity
from ageifr.sampler import PosteriorDraws
from ageifr.summaries import (ABOVE, IFR, SERO, curve_summary, evaluate_curves,
                              ifr_at_age, naive_ifr, population_ifr,
                              population_ifr_draws, rogan_gladen,
                              standardized_density)


def make_draws(model, rows):
    rows = np.atleast_2d(rows)
    return PosteriorDraws(model.constrained_names, rows[None, :, :])


def point_mass(model, gamma0=-1.0, beta0=-5.3, n=200):
    row = np.zeros(len(model.constrained_names))
    names = model.constrained_names
    row[names.index("gamma[L1,0]")] = gamma0
    row[names.index("beta[L1,0]")] = beta0
    return make_draws(model, np.tile(row, (n, 1)))


def random_draws(model, rng, n=400):
    return make_draws(model, rng.normal(0, 0.3, (n, len(model.constrained_names)))
                      + np.where([n.startswith("beta[") and n.endswith(",0]") for n in model.constrained_names], -6, 0))


def density(values):
    f = AgeDensity(np.asarray(values, dtype=float))
    return AgeDensity(f.grid_values / f.integral())


def test_point_mass_curves(model):
    d = point_mass(model)
    for kind in (SERO, IFR):
        s = curve_summary(d, "L1", kind)
        for q in (s.median, s.lo95, s.hi95, s.lo80, s.hi80):
            assert np.allclose(q, s.mean, rtol=1e-14, atol=0)
    s = curve_summary(d, "L1", SERO)
    # spline coefficients are zero: constant in age
    assert np.allclose(s.mean, expit(-1.0), rtol=1e-14)


def test_ordering_and_ranges(model, rng):
    d = random_draws(model, rng)
    for kind in (SERO, IFR):
        s = curve_summary(d, "L2", kind)
        assert np.all(s.lo95 <= s.lo80) and np.all(s.lo80 <= s.median)
        assert np.all(s.median <= s.hi80) and np.all(s.hi80 <= s.hi95)
        assert np.all(s.lo95 >= 0)
        if kind == SERO:
            assert np.all(s.hi95 <= 1)


def test_quantiles_match_sort_oracle(model, rng):
    d = random_draws(model, rng, n=401)
    v = np.sort(evaluate_curves(d, "L1", IFR, [60.0])[:, 0])
    s = ifr_at_age(d, "L1")
    assert s.median == v[200]
    # linear interpolation between order statistics
    pos = 0.025 * 400
    assert s.lo95 == pytest.approx(v[int(pos)] + (pos - int(pos)) * (v[int(pos) + 1] - v[int(pos)]), rel=1e-14)
    c = curve_summary(d, "L1", IFR)
    assert c.median[60] == pytest.approx(v[200], rel=1e-14)


def test_half_draws_stable(model, rng):
    d = random_draws(model, rng, n=2000)
    full = curve_summary(d, "L3", SERO)
    half = curve_summary(make_draws(model, d.flat()[rng.permutation(2000)[:1000]]), "L3", SERO)
    inside = (half.median >= full.lo95) & (half.median <= full.hi95)
    assert inside.mean() >= 0.99


def test_insufficient_draws(model):
    with pytest.raises(InsufficientDraws):
        curve_summary(point_mass(model, n=99), "L1", SERO)


def test_ifr_at_age_point_mass(model):
    d = point_mass(model, beta0=math.log(0.005))
    s = ifr_at_age(d, "L1", 60.0, benchmark=0.001)
    assert s.median == pytest.approx(0.005, rel=1e-12)
    assert s.lo95 == s.hi95 == s.lo80 == s.hi80 == s.median
    assert s.benchmark_flag == ABOVE


def test_population_ifr_constant_curves(model, study):
    d = point_mass(model, beta0=math.log(0.004))
    for f in model.densities.values():
        assert population_ifr(d, "L1", f).mean == pytest.approx(0.004, rel=1e-12)


def test_population_ifr_analytic(model):
    # pi constant, ifr(a) = exp(b0 + x(a) . b) evaluated on the mesh; uniform f:
    # the infection-weighted ratio reduces to the trapezoid mean of ifr on [0, 100]
    d = point_mass(model, beta0=-7.0)
    names = model.constrained_names
    d.constrained[:, :, names.index("beta[L1,1]")] = 0.4
    f = density(np.ones(GRID.size))
    a = np.arange(0, 100.0001, 0.25)
    ifr = evaluate_curves(d, "L1", IFR, a)[0]
    w = np.full(a.size, 0.25)
    w[[0, -1]] = 0.125
    assert population_ifr(d, "L1", f).mean == pytest.approx(np.dot(w, ifr) / 100.0, rel=1e-6)


def test_population_ifr_depends_on_age_structure(model):
    d = point_mass(model, beta0=-7.0)
    d.constrained[:, :, model.constrained_names.index("beta[L1,1]")] = 0.5
    young = density(np.exp(-GRID / 15))
    old = density(np.exp(GRID / 40))
    assert population_ifr(d, "L1", old).mean > population_ifr(d, "L1", young).mean


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 1e4))
def test_population_ifr_scale_invariant(model, c):
    d = point_mass(model, beta0=-7.0)
    d.constrained[:, :, model.constrained_names.index("beta[L1,2]")] = 0.3
    f = model.densities["L1"]
    g = AgeDensity(f.grid_values * c)
    assert population_ifr_draws(d, "L1", g)[0] == pytest.approx(population_ifr_draws(d, "L1", f)[0], rel=1e-12)


def test_zero_infections(model):
    with pytest.raises(ZeroInfections):
        population_ifr(point_mass(model, gamma0=-800.0), "L1", model.densities["L1"])


def test_standardized_density(model):
    f = model.densities["L1"]
    assert np.allclose(standardized_density([f, f, f]).grid_values, f.grid_values, rtol=1e-12)
    outlier = density(np.exp(GRID / 10))
    s = standardized_density([f, f, outlier])
    assert np.allclose(s.grid_values, f.grid_values, rtol=1e-12)
    assert standardized_density(model.densities).integral() == pytest.approx(1.0, abs=1e-6)


def test_rogan_gladen_examples():
    obs = SerologyBinObs(AgeBin(9, 20), 220, 59)
    assert rogan_gladen(obs, 1.0, 1.0).estimate == pytest.approx(59 / 220, rel=1e-14)
    assert rogan_gladen(obs, 0.795, 1.0).estimate == pytest.approx(0.3373, abs=1e-4)
    assert rogan_gladen(SerologyBinObs(AgeBin(9, 20), 100, 1), 0.9, 0.95).estimate == 0.0
    with pytest.raises(DegenerateTest):
        rogan_gladen(obs, 0.5, 0.5)


def test_rogan_gladen_interval_contains_estimate():
    r = rogan_gladen(SerologyBinObs(AgeBin(9, 20), 220, 59), 0.795, 0.99)
    assert r.lo95 <= r.estimate <= r.hi95


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0.3, 1), st.floats(0.3, 1))
def test_rogan_gladen_inverts_positivity(pi, sens, spec):
    if sens + spec <= 1.05:
        return
    assert rogan_gladen(float(positivity(pi, sens, spec)), sens, spec).estimate == pytest.approx(pi, abs=1e-12)


def test_naive_ifr_examples():
    assert naive_ifr(DeathBinObs(AgeBin(60, 69), 0), 10_000, 0.5) == 0.0
    assert naive_ifr(DeathBinObs(AgeBin(60, 69), 71), 10_000, 0.5) == pytest.approx(0.0142, rel=1e-12)
    with pytest.raises(ZeroPrevalence):
        naive_ifr(DeathBinObs(AgeBin(60, 69), 71), 10_000, 0.0)
