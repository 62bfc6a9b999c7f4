import numpy as np
import pytest

from spmp.adjoint import (
    FirstAdjoint,
    SecondAdjointForm,
    curvature,
    duality_checks,
    flow_moments,
    forward_dual,
    polynomial_features,
    second_adjoint_eval,
)
from spmp.engine import ConstantControl, solve_state
from spmp.models import lq, make_model
from spmp.spectral import SpectralBasis
from spmp.stochastics import SeedPolicy, TimeGrid, sample_increments
from spmp.variation import SpikeSpec

BASIS = SpectralBasis(16)
SINE = np.sin(np.pi * BASIS.points)


def sine_noise_model(**extra):
    """State-independent noise along sin(pi x); the remaining coefficients come from ``extra``."""
    return make_model(actions=(0.0,), sigma=lambda t, x, r, u: (0.5 * np.sin(np.pi * x))[None] + 0.0 * r, **extra)


def fitted(model, grid, n=200, control=0.0, seed=1, **kw):
    adj = FirstAdjoint(model, ConstantControl(control), grid, BASIS, **kw)
    return adj.fit(sample_increments(SeedPolicy(seed), grid, model.d, n, start=10_000))


def test_polynomial_features_layout():
    lead = np.array([[1.0, 2.0], [3.0, 4.0]])
    F = polynomial_features(lead, np.zeros(2), np.array([1.0, 0.0]))
    np.testing.assert_array_equal(F, [[1, 1, 0, 1, 0, 0], [1, 3, 0, 9, 0, 0]])


def test_adjoint_of_unit_terminal_gradient_is_heat_flow_of_one():
    model = sine_noise_model(h=lambda x, r: r, dh=lambda x, r: 1.0 + 0 * r)
    grid = TimeGrid(1.0, 32)
    adj = fitted(model, grid, covariance_knots=[0, 16, 31])
    path = adj.path(sample_increments(SeedPolicy(2), grid, 1, 20))
    ones = np.ones(BASIS.n_points)
    odd = np.arange(1, 17) % 2 == 1
    series = np.where(odd, 2 * np.sqrt(2) / (np.arange(1, 17) * np.pi), 0.0)
    for k in (0, 8, 16, 31):
        tau = grid.T - grid.time(k)
        heat = BASIS.semigroup(ones, tau)
        # the ridge fallback on the degenerate regressors shrinks the fit by a relative 1e-8 per knot
        assert np.abs(path.p[:, k] - heat).max() <= 1e-6 * np.abs(heat).max()
        closed = BASIS.to_grid(series * np.exp(-BASIS.eigenvalues * tau))
        err = np.sqrt(BASIS.lp_norm_pow(path.p[0, k] - closed, 2) / BASIS.lp_norm_pow(closed, 2))
        assert err < 1e-2
    # only the first mode of the state is random, so the other regressors are degenerate
    assert len(adj.ridge_knots_) > 0


def test_martingale_part_vanishes_for_deterministic_adjoint():
    # noise in the four regressed modes keeps the design full rank
    shape = lambda x: 0.3 * sum(np.sin(j * np.pi * x) for j in range(1, 5))
    model = make_model(actions=(0.0,), sigma=lambda t, x, r, u: shape(x)[None] + 0.0 * r,
                       h=lambda x, r: r, dh=lambda x, r: 1.0 + 0 * r)
    grid = TimeGrid(1.0, 32)
    adj = fitted(model, grid, covariance_knots=[0, 16, 31])
    # the state is (nearly) deterministic on the first knots only
    assert max(adj.ridge_knots_) < 8
    path = adj.path(sample_increments(SeedPolicy(2), grid, 1, 20))
    for k in (16, 31):
        q_size = np.abs(BASIS.integrate(path.q[:, k, 0] * SINE))
        se = adj.q_linear_se(k, path.X[:, k], np.broadcast_to(SINE, (1, 20, 32)))
        assert np.all(q_size <= 3 * se + 1e-14)


def test_terminal_knot_is_exact():
    grid = TimeGrid(1.0, 16)
    adj = fitted(lq(a_h=2.0), grid, control=0.5)
    X = np.random.default_rng(0).standard_normal((3, BASIS.n_points))
    np.testing.assert_array_equal(adj.predict(X, 16), 2.0 * X)


def test_adjoint_input_validation():
    grid = TimeGrid(1.0, 8)
    with pytest.raises(ValueError, match="samples"):
        fitted(lq(), grid, n=10)
    with pytest.raises(ValueError, match="n_reg"):
        fitted(lq(), grid, n=400, n_reg=17)
    adj = fitted(lq(), grid)
    with pytest.raises(ValueError):
        adj.coefficients(8, np.zeros((1, BASIS.n_points)))
    with pytest.raises(KeyError):
        adj.q_linear_se(3, np.zeros((1, BASIS.n_points)), np.zeros((1, 1, BASIS.n_points)))


@pytest.mark.parametrize("k", [0, 8, 24])
def test_adjoint_matches_forward_flow_representation(k):
    model, grid = lq(), TimeGrid(1.0, 32)
    adj = fitted(model, grid, n=2000, control=0.5)
    n = 2000
    dW = sample_increments(SeedPolicy(3), grid, 1, n)
    X = solve_state(model, ConstantControl(0.5), dW, grid, BASIS, keep=[k]).values[:, 0]
    f = SINE + 0.5 * np.sin(2 * np.pi * BASIS.points)
    via_adjoint = BASIS.integrate(adj.predict(X, k) * f)
    via_flow = forward_dual(model, ConstantControl(0.5), k, f, dW, grid, BASIS)
    diff = via_adjoint - via_flow
    assert abs(diff.mean()) < 3 * diff.std(ddof=1) / np.sqrt(n)


def test_norms_are_finite():
    grid = TimeGrid(1.0, 16)
    adj = fitted(lq(), grid)
    norms = adj.path(sample_increments(SeedPolicy(4), grid, 1, 10)).norms()
    assert np.isfinite(norms["p"]).all() and np.isfinite(norms["q"]).all()


def test_identical_action_gives_vanishing_duality_sides():
    grid = TimeGrid(1.0, 64)
    adj = fitted(lq(), grid, control=0.5)
    out = duality_checks(lq(), ConstantControl(0.5), SpikeSpec(0.25, 0.25, 0.5), adj, 20, grid, BASIS, SeedPolicy(5))
    for key in ("lhs1", "rhs1", "lhs2", "rhs2", "gap1", "gap2"):
        assert out[key] == 0.0


def curvature_of(model, N=3, n=4, d=1, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, n + 1, BASIS.n_points))
    u = np.zeros((N, n))
    p = rng.standard_normal((N, n, BASIS.n_points))
    q = rng.standard_normal((N, n, d, BASIS.n_points))
    return curvature(model, X, u, p, q, TimeGrid(1.0, n), BASIS), p


def test_curvature_without_coefficient_curvature_is_cost_curvature():
    fields, _ = curvature_of(lq(a_l=3.0, actions=(0.0,)))
    np.testing.assert_allclose(fields.Hbar, 3.0)


def test_curvature_with_quadratic_drift_is_twice_the_adjoint():
    model = make_model(b=lambda t, x, r, u: r * r, d2b=lambda t, x, r, u: 2.0 + 0 * r)
    fields, p = curvature_of(model)
    np.testing.assert_allclose(fields.Hbar, 2 * p)


def test_terminal_curvature_of_square():
    model = make_model(h=lambda x, r: r * r, d2h=lambda x, r: 2.0 + 0 * r)
    fields, _ = curvature_of(model)
    np.testing.assert_allclose(fields.hbar, 2.0)


def heat_form_model():
    return sine_noise_model(h=lambda x, r: 0.5 * r * r, dh=lambda x, r: r, d2h=lambda x, r: 1.0 + 0 * r)


def test_second_adjoint_closed_form():
    grid = TimeGrid(1.0, 50)
    k = 45  # T - t = 0.1
    value = second_adjoint_eval(k, SINE, SINE, np.zeros(BASIS.n_points), 0, heat_form_model(),
                                ConstantControl(0.0), grid, BASIS, SeedPolicy(0), n_branches=4)
    exact = 0.5 * np.exp(-2 * np.pi ** 2 * 0.1)
    assert value == pytest.approx(exact, rel=1e-10)
    assert value == pytest.approx(0.069475, rel=5e-4)


def test_second_adjoint_of_zero_field():
    grid = TimeGrid(1.0, 16)
    form = SecondAdjointForm(lq(), ConstantControl(0.5), grid, BASIS, None, SeedPolicy(0), 8)
    X = np.broadcast_to(SINE, (1, 32))
    assert form.evaluate(4, X[0], 0, np.zeros(32), SINE) == (0.0, 0.0)


def test_second_adjoint_symmetric_and_bilinear():
    grid = TimeGrid(1.0, 32)
    model = lq()
    adj = fitted(model, grid, control=0.5)
    form = SecondAdjointForm(model, ConstantControl(0.5), grid, BASIS, adj, SeedPolicy(0), 8)
    X = solve_state(model, ConstantControl(0.5), sample_increments(SeedPolicy(1), grid, 1, 3), grid, BASIS,
                    keep=[8]).values[:, 0]
    g = BASIS.project(np.where(np.abs(BASIS.points - 0.5) < 0.2, 1.0, 0.0))
    fields = np.stack([SINE, g, 2.5 * SINE + g])
    G, _ = form.gram(8, X, [0, 1, 2], fields)
    np.testing.assert_array_equal(G, G.transpose(0, 2, 1))
    np.testing.assert_allclose(G[:, 2, 1], 2.5 * G[:, 0, 1] + G[:, 1, 1], rtol=1e-12, atol=1e-14)


def test_second_adjoint_rejects_single_branch_and_bad_knot():
    grid = TimeGrid(1.0, 16)
    X = np.zeros(BASIS.n_points)
    with pytest.raises(ValueError, match="2 inner branches"):
        SecondAdjointForm(lq(), ConstantControl(0.5), grid, BASIS, None, SeedPolicy(0), 1).evaluate(3, X, 0, SINE, SINE)
    with pytest.raises(ValueError):
        SecondAdjointForm(lq(), ConstantControl(0.5), grid, BASIS, None, SeedPolicy(0), 4).evaluate(16, X, 0, SINE, SINE)


def test_conditional_form_averages_to_direct_pairing():
    """Per-outer branch averages agree with the pairing along each path's own future."""
    model, grid, k = lq(), TimeGrid(1.0, 16), 4
    control = ConstantControl(0.5)
    n_outer = 300
    dW = sample_increments(SeedPolicy(2), grid, 1, n_outer)
    X = solve_state(model, control, dW, grid, BASIS, keep=[k]).values[:, 0]
    g = np.sin(2 * np.pi * BASIS.points)
    # a random F_t-measurable test field
    fields = (SINE[None] * (1 + 0.5 * np.tanh(BASIS.integrate(X * SINE)))[:, None] + 0.3 * g)[:, None]
    form = SecondAdjointForm(model, control, grid, BASIS, None, SeedPolicy(2), 32)
    nested, _ = form.gram(k, X, np.arange(n_outer), fields)
    own_future = np.repeat(dW[:, None, k:], 2, axis=1)
    pair = SecondAdjointForm(model, control, grid, BASIS, None, SeedPolicy(2), 2)
    direct, _ = pair.gram(k, X, np.arange(n_outer), fields, dW_tail=own_future)
    a, b = nested[:, 0, 0], direct[:, 0, 0]
    se = np.hypot(a.std(ddof=1), b.std(ddof=1)) / np.sqrt(n_outer)
    assert abs(a.mean() - b.mean()) < 3 * se


def test_form_is_continuous_in_the_conditioning_time():
    grid = TimeGrid(1.0, 64)
    form = SecondAdjointForm(heat_form_model(), ConstantControl(0.0), grid, BASIS, None, SeedPolicy(0), 2)
    f, g = SINE, SINE + np.sin(2 * np.pi * BASIS.points)
    value = lambda k: form.evaluate(k, np.zeros(BASIS.n_points), 0, f, g)[0]
    gaps = [abs(value(32 + gap) - value(32)) for gap in (16, 8, 4, 2, 1)]
    assert all(a > b for a, b in zip(gaps, gaps[1:]))


def test_flow_without_linearisation_is_heat_contraction():
    grid = TimeGrid(1.0, 16)
    f = SINE + np.sin(3 * np.pi * BASIS.points)
    mom = flow_moments(heat_form_model(), ConstantControl(0.0), 4, f, 5, grid, BASIS, SeedPolicy(0))
    for j in range(mom.shape[1]):
        expected = BASIS.lp_norm(BASIS.semigroup(f, j * grid.dt), 4)
        assert mom[0, j] == pytest.approx(expected, rel=1e-12)
    assert np.all(mom[0] / BASIS.lp_norm(f, 4) <= 1 + 1e-12)
