import numpy as np
import pytest

from spmp.engine import (
    ConstantControl,
    FeedbackControl,
    LinearSPDESpec,
    OpenLoopControl,
    SimulationError,
    estimate_cost,
    map_chunks,
    mild_step,
    solve_linear,
    solve_state,
)
from spmp.models import build_model, lq, make_model
from spmp.spectral import SpectralBasis
from spmp.stochastics import SeedPolicy, TimeGrid, sample_increments, sample_wiener


def test_mild_step_without_drift_or_noise_is_heat_flow(basis16):
    X = basis16.field(np.sin(np.pi * basis16.points) - 0.5 * np.sin(3 * np.pi * basis16.points))
    out = mild_step(X, basis16.zeros(), [basis16.zeros()], [0.7], 0.01)
    np.testing.assert_allclose(out.modes, X.modes * np.exp(-basis16.eigenvalues * 0.01), atol=1e-15)


def test_mild_step_with_zero_diffusivity_adds_drift():
    basis = SpectralBasis(8, diffusivity=0.0)
    X = basis.from_modes(np.arange(8.0))
    c = basis.from_modes(np.ones(8))
    out = mild_step(X, c, [], [], 0.1)
    np.testing.assert_allclose(out.modes, np.arange(8.0) + 0.1, atol=1e-15)


def test_mild_step_single_mode_scalar_recursion(basis16):
    X = basis16.from_modes(np.eye(16)[0] * 2.0)
    drift = basis16.from_modes(np.eye(16)[0] * -1.0)
    noise = [basis16.from_modes(np.eye(16)[0] * 0.3)]
    out = mild_step(X, drift, noise, [0.05], 0.01)
    expected = np.exp(-np.pi ** 2 * 0.01) * (2.0 - 0.01 + 0.3 * 0.05)
    assert out.modes[0] == pytest.approx(expected, rel=1e-14)
    assert np.abs(out.modes[1:]).max() == 0.0
    with pytest.raises(ValueError):
        mild_step(X, drift, noise, [0.1, 0.2], 0.01)
    with pytest.raises(ValueError):
        mild_step(X, drift, noise, [0.1], 0.0)


def test_zero_coefficients_give_pure_heat_flow(basis16, seeds, grid64):
    model = make_model(T=1.0, x0=lambda x: np.sin(np.pi * x) + np.sin(2 * np.pi * x))
    path = solve_state(model, ConstantControl(0.0), sample_wiener(seeds, grid64, 1, 0), grid64, basis16)
    x = basis16.points
    for k in (0, 10, 64):
        t = grid64.time(k)
        expected = np.exp(-np.pi ** 2 * t) * np.sin(np.pi * x) + np.exp(-4 * np.pi ** 2 * t) * np.sin(2 * np.pi * x)
        np.testing.assert_allclose(path.values[0, k], expected, atol=1e-13)


def scalar_lq_mode(model_params, action, dW, dt):
    """Independent recursion for the first sine coefficient of the lq model."""
    beta, mu = model_params["beta"], model_params["mu"]
    delta, rho = np.array(model_params["delta"]), np.array(model_params["rho"])
    y = np.full(dW.shape[0], model_params["x0_amp"] / np.sqrt(2.0))
    out = [y]
    decay = np.exp(-np.pi ** 2 * dt)
    for k in range(dW.shape[1]):
        noise = ((delta * y[:, None] + rho * action) * dW[:, k]).sum(axis=1)
        y = decay * (y + (beta * y + mu * action) * dt + noise)
        out.append(y)
    return np.stack(out, axis=1)


@pytest.mark.parametrize("d,action", [(1, -1.0), (2, 0.5)])
def test_lq_first_mode_matches_scalar_recursion(basis16, seeds, grid64, d, action):
    model = lq(delta=(0.3, 0.1)[:d], rho=(0.4, -0.2)[:d])
    dW = sample_increments(seeds, grid64, d, 20)
    path = solve_state(model, ConstantControl(action), dW, grid64, basis16)
    modes = basis16.to_modes(path.values)
    oracle = scalar_lq_mode(model.params, action, dW, grid64.dt)
    np.testing.assert_allclose(modes[..., 0], oracle, rtol=1e-12, atol=1e-14)
    assert np.abs(modes[..., 1:]).max() < 1e-13


def test_moment_bounds_stable_in_sample_size():
    basis, grid = SpectralBasis(16), TimeGrid(1.0, 64)
    model = build_model("nonconvex-sigma", forcing=10.0)
    seeds = SeedPolicy(11)
    bounds = []
    for n in (250, 500, 1000):
        path = solve_state(model, ConstantControl(1.0), sample_increments(seeds, grid, 1, n), grid, basis)
        bounds.append({p: float(np.max(basis.lp_norm_pow(path.values, p).mean(axis=0)) ** (1 / p))
                       for p in (2, 4, 8)})
    for p in (2, 4, 8):
        vals = np.array([b[p] for b in bounds])
        assert np.isfinite(vals).all()
        assert np.ptp(vals) / vals.mean() < 0.05


def test_strong_convergence_in_time_step(basis16):
    model = lq()
    seeds, n_paths = SeedPolicy(5), 200
    fine_grid = TimeGrid(1.0, 512)
    fine = sample_increments(seeds, fine_grid, 1, n_paths)
    errors, dts = [], []
    for n in (16, 32, 64, 128):
        coarse = fine.reshape(n_paths, n, 512 // n, 1).sum(axis=2)
        finer = fine.reshape(n_paths, 2 * n, 256 // n, 1).sum(axis=2)
        a = solve_state(model, ConstantControl(0.5), coarse, TimeGrid(1.0, n), basis16, keep="final").final
        b = solve_state(model, ConstantControl(0.5), finer, TimeGrid(1.0, 2 * n), basis16, keep="final").final
        errors.append(np.sqrt(basis16.lp_norm_pow(a - b, 2).mean()))
        dts.append(1.0 / n)
    slope = np.polyfit(np.log(dts), np.log(errors), 1)[0]
    assert slope >= 0.4


def test_linear_equation_with_zero_forcing_stays_zero(basis16, seeds, grid64):
    rng = np.random.default_rng(0)
    field = rng.uniform(-1, 1, (1, basis16.n_points))
    spec = LinearSPDESpec(a=lambda k: field, b=lambda k: field[None])
    V = solve_linear(spec, sample_wiener(seeds, grid64, 1, 0), grid64, basis16)
    assert np.abs(V).max() == 0.0


def test_linear_equation_constant_forcing_first_order(basis16, seeds):
    c = np.sin(np.pi * basis16.points) + np.sin(3 * np.pi * basis16.points)
    lam = basis16.eigenvalues
    exact = basis16.to_modes(c) * (1 - np.exp(-lam)) / lam
    errors = []
    for n in (64, 128, 256):
        grid = TimeGrid(1.0, n)
        V = solve_linear(LinearSPDESpec(alpha=lambda k: c[None]), np.zeros((1, n, 1)), grid, basis16)
        errors.append(np.abs(basis16.to_modes(V[0, -1]) - exact).max())
    assert errors[0] < 0.05
    assert 1.7 < errors[0] / errors[1] < 2.3 and 1.7 < errors[1] / errors[2] < 2.3


def test_linear_equation_enforces_declared_bound(basis16, seeds, grid64):
    spec = LinearSPDESpec(a=lambda k: np.full((1, basis16.n_points), 3.0), bound=2.0)
    with pytest.raises(ValueError, match="bound"):
        solve_linear(spec, np.zeros((1, 64, 1)), grid64, basis16)


def test_linear_moment_estimate_ratio_bounded(basis16, seeds, grid64):
    """|||V|||_4 stays within a fixed multiple of the forcing size for random bounded coefficients."""
    rng = np.random.default_rng(3)
    dW = sample_increments(seeds, grid64, 1, 200)
    ratios = []
    for _ in range(6):
        a = rng.uniform(-1, 1, (1, basis16.n_points))
        b = rng.uniform(-1, 1, (1, 1, basis16.n_points))
        alpha = rng.uniform(-1, 1, (1, basis16.n_points)) * rng.uniform(0.1, 3)
        beta = rng.uniform(-1, 1, (1, 1, basis16.n_points)) * rng.uniform(0.1, 3)
        spec = LinearSPDESpec(a=lambda k: a, b=lambda k: b, alpha=lambda k: alpha, beta=lambda k: beta, bound=1.0)
        V = solve_linear(spec, dW, grid64, basis16)
        lhs = np.max(basis16.lp_norm_pow(V, 4).mean(axis=0)) ** 0.25
        rhs = basis16.lp_norm(alpha[0], 4) + basis16.lp_norm(beta[0, 0], 4)
        ratios.append(lhs / rhs)
    assert np.isfinite(ratios).all() and max(ratios) < 3.0


def test_cost_of_pure_heat_flow_closed_form(basis64, seeds):
    model = make_model(T=0.1, h=lambda x, r: r * r)
    est = estimate_cost(model, ConstantControl(0.0), 4, TimeGrid(0.1, 20), basis64, seeds)
    assert est.J == pytest.approx(0.5 * np.exp(-0.2 * np.pi ** 2), rel=1e-12)
    assert est.J == pytest.approx(0.069475, rel=5e-4)
    assert est.std_error < 1e-15


def test_cost_of_unit_running_cost_is_horizon(basis16, seeds):
    model = make_model(T=0.7, l=lambda t, x, r, u: 1.0 + 0 * r)
    est = estimate_cost(model, ConstantControl(0.0), 3, TimeGrid(0.7, 14), basis16, seeds)
    assert est.J == pytest.approx(0.7, rel=1e-12)


def test_cost_standard_error_scales_like_inverse_root():
    basis, grid, model = SpectralBasis(8), TimeGrid(1.0, 16), lq()
    seeds = SeedPolicy(2)
    ns = np.array([200, 800, 3200])
    ses = [estimate_cost(model, ConstantControl(0.0), int(n), grid, basis, seeds).std_error for n in ns]
    slope = np.polyfit(np.log(ns), np.log(ses), 1)[0]
    assert -0.6 < slope < -0.4


def test_blow_up_raises_simulation_error(basis16, seeds, grid64):
    model = make_model(b=lambda t, x, r, u: 1e200 * r * r)
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(SimulationError, match="knot"):
        solve_state(model, ConstantControl(0.0), sample_wiener(seeds, grid64, 1, 0), grid64, basis16)


def test_control_outside_action_set_rejected(basis16, seeds, grid64):
    with pytest.raises(ValueError, match="action set"):
        solve_state(lq(), ConstantControl(0.25), sample_wiener(seeds, grid64, 1, 0), grid64, basis16)


def test_open_loop_and_feedback_controls(basis16, seeds, grid64):
    model = lq()
    two = OpenLoopControl.two_piece(grid64, -1.0, 1.0, 0.5)
    path = solve_state(model, two, sample_increments(seeds, grid64, 1, 3), grid64, basis16)
    assert np.all(path.controls[:, :32] == -1) and np.all(path.controls[:, 32:] == 1)
    rule = FeedbackControl(lambda t, X: np.where(X.mean(axis=1) > 0, -1.0, 1.0), grid64.dt)
    fb = solve_state(model, rule, sample_increments(seeds, grid64, 1, 3), grid64, basis16)
    assert set(np.unique(fb.controls)) <= {-1.0, 1.0}


@pytest.mark.parametrize("threads", [1, 3])
def test_chunked_evaluation_is_thread_invariant(threads):
    basis, grid, model = SpectralBasis(8), TimeGrid(1.0, 16), lq()
    seeds = SeedPolicy(4)
    base = estimate_cost(model, ConstantControl(0.5), 50, grid, basis, seeds, chunk=7, threads=1)
    other = estimate_cost(model, ConstantControl(0.5), 50, grid, basis, seeds, chunk=7, threads=threads)
    np.testing.assert_array_equal(base.samples, other.samples)
    assert map_chunks(lambda a, b: np.arange(a, b), 10, 3, threads).tolist() == list(range(10))
