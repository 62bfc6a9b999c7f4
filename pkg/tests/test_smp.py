import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spmp.adjoint import FirstAdjoint, SecondAdjointForm
from spmp.engine import ConstantControl, solve_state
from spmp.models import lq, make_model
from spmp.smp import (
    RateEstimator,
    brute_force_controls,
    check_mp,
    final_duality_check,
    hamiltonian,
    hamiltonian_values,
    mp_knots,
    mp_statistic,
    rate_estimate,
)
from spmp.spectral import SpectralBasis
from spmp.stochastics import SeedPolicy, TimeGrid, sample_increments

BASIS = SpectralBasis(16)
EPS = [2.0 ** -j for j in range(2, 6)]


def test_hamiltonian_of_zero_coefficients():
    f = BASIS.field(np.sin(np.pi * BASIS.points))
    assert hamiltonian(0.3, 0.0, f, f, [f], make_model()) == 0.0


def test_hamiltonian_without_adjoint_is_running_cost():
    model = lq()
    X = BASIS.field(np.sin(np.pi * BASIS.points))
    value = hamiltonian(0.3, 0.5, X, BASIS.zeros(), [BASIS.zeros()], model)
    expected = 0.5 * 0.5 + 0.5 * 0.2 * 0.25  # a_l ||sin||^2 / 2 + c_u u^2 / 2
    assert value == pytest.approx(expected, rel=1e-12)


def test_hamiltonian_of_unit_drift_against_unit_adjoint():
    model = make_model(b=lambda t, x, r, u: 1.0 + 0 * r)
    ones = np.ones(BASIS.n_points)
    X = BASIS.zeros()
    # the constant 1 is not band-limited, so evaluate through the batched grid-value routine
    val = hamiltonian_values(model, 0.0, BASIS.points, X.grid_values[None], np.zeros(1), ones[None],
                             np.zeros((1, 1, BASIS.n_points)), BASIS)
    assert val[0] == pytest.approx(1.0, rel=1e-14)


def test_hamiltonian_checks_noise_fields():
    f = BASIS.zeros()
    with pytest.raises(ValueError):
        hamiltonian(0.0, 0.0, f, f, [f, f], make_model())


def test_rate_estimate_examples():
    eps = np.array(EPS)
    assert rate_estimate(list(zip(eps, np.sqrt(eps))))["slope"] == pytest.approx(0.5, abs=1e-12)
    fit = rate_estimate(list(zip(eps, 3 * eps)))
    assert fit["slope"] == pytest.approx(1.0, abs=1e-12)
    assert fit["intercept"] == pytest.approx(np.log(3), abs=1e-12)
    assert fit["r2"] == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    noisy = eps ** 2 * (1 + 0.01 * rng.standard_normal(len(eps)))
    assert 1.9 <= rate_estimate(list(zip(eps, noisy)))["slope"] <= 2.1


def test_rate_estimate_rejects_bad_tables():
    with pytest.raises(ValueError):
        rate_estimate([(0.1, 1.0), (0.05, 0.0), (0.02, 1.0), (0.01, 1.0)])
    with pytest.raises(ValueError):
        rate_estimate([(0.1, 1.0), (0.05, 0.5), (0.02, 0.2)])


@settings(max_examples=50, deadline=None)
@given(slope=st.floats(-3, 3), intercept=st.floats(-5, 5))
def test_rate_estimator_recovers_power_laws(slope, intercept):
    eps = np.geomspace(1e-3, 0.5, 6)
    est = RateEstimator().fit(eps, np.exp(intercept) * eps ** slope)
    assert est.slope_ == pytest.approx(slope, abs=1e-8)
    np.testing.assert_allclose(est.predict(eps), np.exp(intercept) * eps ** slope, rtol=1e-8)


def test_mp_knots_interior():
    ks = mp_knots(TimeGrid(1.0, 64), 3)
    assert ks == [16, 32, 48]


def mp_setup(model, control, grid, n_adjoint=400, knots=(8,)):
    adj = FirstAdjoint(model, control, grid, BASIS, covariance_knots=knots)
    adj.fit(sample_increments(SeedPolicy(9), grid, model.d, n_adjoint, start=50_000))
    form = SecondAdjointForm(model, control, grid, BASIS, adj, SeedPolicy(9), 16)
    X = solve_state(model, control, sample_increments(SeedPolicy(9), grid, model.d, 3), grid, BASIS,
                    keep=list(knots)).values[:, 0]
    return adj, form, X


def test_mp_statistic_rows():
    model, grid, control = lq(), TimeGrid(1.0, 16), ConstantControl(0.5)
    adj, form, X = mp_setup(model, control, grid)
    rows = mp_statistic(8, X, np.full(3, 0.5), np.arange(3), model, adj, form, grid, BASIS)
    assert len(rows) == 3 * len(model.actions)
    for r in rows:
        assert r.total == pytest.approx(r.dH + r.quad, abs=1e-15)
        if r.v == r.u:
            assert (r.dH, r.quad, r.total) == (0.0, 0.0, 0.0)
        else:
            assert r.std_error > 0


def test_control_free_diffusion_has_no_quadratic_term():
    model, grid, control = lq(rho=(0.0,)), TimeGrid(1.0, 16), ConstantControl(0.5)
    adj, form, X = mp_setup(model, control, grid)
    rows = mp_statistic(8, X, np.full(3, 0.5), np.arange(3), model, adj, form, grid, BASIS)
    assert all(r.quad == 0.0 for r in rows)


def test_singleton_action_set_has_no_violation():
    model, grid = lq(actions=(0.5,)), TimeGrid(1.0, 16)
    rep = check_mp(model, ConstantControl(0.5), grid, BASIS, SeedPolicy(0), n_adjoint=100, n_knots=2,
                   n_outer=3, n_branches=4)
    assert rep.violation_fraction == 0.0
    assert all(r.total == 0.0 for r in rep.rows)


def test_brute_force_optimal_constant_satisfies_maximum_principle():
    model, grid, seeds = lq(), TimeGrid(1.0, 32), SeedPolicy(6)
    cands = brute_force_controls(model, grid, BASIS, seeds, 400)
    assert cands[0].diff_to_best == 0.0 and all(c.diff_to_best >= 0 for c in cands)
    best = next(c for c in cands if c.label.startswith("const"))
    rep = check_mp(model, best.control, grid, BASIS, seeds, n_adjoint=1000, n_knots=3, n_outer=4, n_branches=32)
    assert all(r.total >= -3 * r.std_error for r in rep.rows)
    assert 0.0 <= rep.violation_fraction <= 1.0
    d = rep.to_dict()
    assert d["config"]["n_knots"] == 3 and len(d["samples"]) == len(rep.rows)


def zero_curvature_model():
    s = lambda x: np.sin(np.pi * x)
    return make_model(
        actions=(-1.0, 1.0),
        b=lambda t, x, r, u: -0.5 * r, db=lambda t, x, r, u: -0.5 + 0 * r,
        sigma=lambda t, x, r, u: ((0.3 * r + 0.4 * u * s(x)))[None],
        dsigma=lambda t, x, r, u: (0.3 + 0 * r)[None],
        l=lambda t, x, r, u: r, dl=lambda t, x, r, u: 1.0 + 0 * r,
        h=lambda x, r: r, dh=lambda x, r: 1.0 + 0 * r,
    )


@pytest.mark.parametrize("model_fn,v", [(lq, -1.0), (zero_curvature_model, 1.0)])
def test_final_duality_trivial_cases(model_fn, v):
    model, grid = model_fn(), TimeGrid(1.0, 64)
    control = ConstantControl(-1.0)
    adj = FirstAdjoint(model, control, grid, BASIS).fit(sample_increments(SeedPolicy(1), grid, model.d, 100))
    rows = final_duality_check(model, control, adj, 0.25, v, EPS, 8, grid, BASIS, SeedPolicy(1))
    for row in rows:
        assert row["lhs"] == 0.0 and row["rhs"] == 0.0 and row["gap"] == 0.0
