"""Spike perturbations and the first/second variation processes.

The spiked control replaces ``u`` by ``v`` on the knots ``k0 <= k < k1`` of the
window ``[t0, t0 + eps)``.  All perturbed quantities are simulated on the same
Wiener increments as the reference state, so every comparison is pathwise.

Two conventions exist for the first variation.  ``form="mild"`` keeps the
drift difference ``delta b`` as a forcing term of ``Y``; ``form="differential"``
drops it, in which case ``delta b`` enters through ``Z`` only.  When the drift
does not depend on the control the two agree.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .engine import (
    ConstantControl,
    ControlPath,
    LinearSPDESpec,
    StatePath,
    _checked_actions,
    map_chunks,
    noise_term,
    solve_linear,
    solve_state,
    state_steps,
)
from .models import ProblemModel
from .spectral import SpectralBasis
from .stochastics import SeedPolicy, TimeGrid, sample_increments

__all__ = [
    "SpikeSpec",
    "SpikedControl",
    "spike",
    "VariationBundle",
    "variation_bundle",
    "first_variation",
    "second_variation",
    "SweepRow",
    "variation_sweep",
    "expansion_residual",
    "cost_expansion",
    "triple_norm",
]

FORMS = ("mild", "differential")


@dataclass(frozen=True)
class SpikeSpec:
    """Spike window ``[t0, t0 + eps]`` and replacement control ``v``.

    ``v`` may be a :class:`ControlPath` or a single action.
    """

    t0: float
    eps: float
    v: ControlPath | float
    snap_tol: float = 0.25

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not self.t0 > 0:
            raise ValueError(f"t0 must lie in (0, T), got {self.t0}")
        if not isinstance(self.v, ControlPath):
            object.__setattr__(self, "v", ConstantControl(float(self.v)))

    def window(self, grid: TimeGrid) -> tuple[int, int]:
        """Knot indices ``(k0, k1)``; the control is replaced for ``k0 <= k < k1``."""
        if not self.t0 + self.eps < grid.T:
            raise ValueError(f"spike window [{self.t0}, {self.t0 + self.eps}] must end before T={grid.T}")
        k0, k1 = (int(round(s / grid.dt)) for s in (self.t0, self.t0 + self.eps))
        for s, k in ((self.t0, k0), (self.t0 + self.eps, k1)):
            if abs(s / grid.dt - k) > self.snap_tol:
                raise ValueError(f"spike endpoint {s} is off the time grid (dt={grid.dt})")
        if k1 <= k0:
            raise ValueError(f"spike window shorter than one step (eps={self.eps}, dt={grid.dt})")
        if k0 < 1 or k1 >= grid.n_steps:
            raise ValueError("spike window must stay inside (0, T)")
        return k0, k1


@dataclass(frozen=True)
class SpikedControl(ControlPath):
    """``v`` on ``k0 <= k < k1`` and ``base`` elsewhere."""

    base: ControlPath
    replacement: ControlPath
    k0: int
    k1: int

    def actions(self, k, X, sample_ids):
        if self.k0 <= k < self.k1:
            return self.replacement.actions(k, X, sample_ids)
        return self.base.actions(k, X, sample_ids)


def spike(u: ControlPath, s: SpikeSpec, grid: TimeGrid) -> SpikedControl:
    k0, k1 = s.window(grid)
    return SpikedControl(u, s.v, k0, k1)


# -- coupled stepping ------------------------------------------------------


class _Coefficients:
    """Reference coefficients and spike differences at one knot."""

    def __init__(self, model: ProblemModel, t, x, X, u, ue=None):
        self.b1 = model.drift(t, x, X, u, 1)
        self.b2 = model.drift(t, x, X, u, 2)
        self.s1 = model.diffusion(t, x, X, u, 1)
        self.s2 = model.diffusion(t, x, X, u, 2)
        self.l1 = model.running(t, x, X, u, 1)
        self.l2 = model.running(t, x, X, u, 2)
        self.in_window = ue is not None
        if self.in_window:
            self.db = model.drift(t, x, X, ue) - model.drift(t, x, X, u)
            self.ds = model.diffusion(t, x, X, ue) - model.diffusion(t, x, X, u)
            self.db1 = model.drift(t, x, X, ue, 1) - self.b1
            self.ds1 = model.diffusion(t, x, X, ue, 1) - self.s1
            self.dl = model.running(t, x, X, ue) - model.running(t, x, X, u)


def _first_variation_increment(c: _Coefficients, Y, dW, dt, form):
    incr = Y + c.b1 * Y * dt
    noise = c.s1 * Y[None]
    if c.in_window:
        noise = noise + c.ds
        if form == "mild":
            incr = incr + c.db * dt
    return incr + noise_term(noise, dW)


def _second_variation_increment(c: _Coefficients, Y, Z, dW, dt):
    Y2 = 0.5 * Y * Y
    drift = c.b1 * Z + c.b2 * Y2
    noise = c.s1 * Z[None] + c.s2 * Y2[None]
    if c.in_window:
        drift = drift + c.db + c.db1 * Y
        noise = noise + c.ds1 * Y[None]
    return Z + drift * dt + noise_term(noise, dW)


# -- stored bundle (small problems and tests) --------------------------------


@dataclass
class VariationBundle:
    """Reference and spiked states with first/second variations on shared noise.

    ``Y`` and ``Z`` are grid-value paths of shape ``(N, n_steps + 1, P)``;
    ``deltas`` maps names (``db, dsigma, db1, dsigma1, dl``) to
    ``(N, n_steps, ...)`` arrays that vanish outside the window.
    """

    X: StatePath
    Xe: StatePath
    Y: np.ndarray
    Z: np.ndarray
    deltas: dict = field(repr=False)
    window: tuple

    @property
    def residual(self) -> np.ndarray:
        return self.Xe.values - self.X.values - self.Y - self.Z


def _spiked_actions(model, control, s_control: SpikedControl, k, X, ids):
    u = _checked_actions(model, control, k, X, ids)
    if s_control.k0 <= k < s_control.k1:
        return u, _checked_actions(model, s_control.replacement, k, X, ids)
    return u, None


def variation_bundle(
    model: ProblemModel,
    u: ControlPath,
    s: SpikeSpec,
    w,
    grid: TimeGrid,
    basis: SpectralBasis,
    form: str = "mild",
) -> VariationBundle:
    """Simulate ``X, X^eps, Y^eps, Z^eps`` and the delta fields, storing everything.

    The spiked control is evaluated along the reference path ``X`` (it is the
    same progressive process as ``u`` outside the window), and ``X^eps`` is
    driven by those actions.
    """
    if form not in FORMS:
        raise ValueError(f"form must be one of {FORMS}")
    sc = spike(u, s, grid)
    X = solve_state(model, u, w, grid, basis)
    dW = np.asarray(w.increments[None] if hasattr(w, "increments") else w, dtype=float)
    if dW.ndim == 2:
        dW = dW[None]
    N, n, P = dW.shape[0], grid.n_steps, basis.n_points
    x, dt, ids = basis.points, grid.dt, X.sample_ids
    Xe_vals = np.empty_like(X.values)
    Xe_vals[:, 0] = X.values[:, 0]
    Y = np.zeros((N, n + 1, P))
    Z = np.zeros((N, n + 1, P))
    ue_all = np.empty((N, n))
    names = ("db", "dsigma", "db1", "dsigma1", "dl")
    deltas = {k: np.zeros((N, n, P)) for k in ("db", "db1", "dl")}
    deltas["dsigma"] = np.zeros((N, n, model.d, P))
    deltas["dsigma1"] = np.zeros((N, n, model.d, P))
    for k in range(n):
        t = k * dt
        Xk, Xek = X.values[:, k], Xe_vals[:, k]
        uk, vk = _spiked_actions(model, u, sc, k, Xk, ids)
        uek = uk if vk is None else vk
        ue_all[:, k] = uek
        c = _Coefficients(model, t, x, Xk, uk, vk)
        if c.in_window:
            for name, arr in zip(names, (c.db, c.ds, c.db1, c.ds1, c.dl)):
                deltas[name][:, k] = np.moveaxis(arr, 0, 1) if arr.ndim == 3 else arr
        Xe_next = Xek + model.drift(t, x, Xek, uek) * dt + noise_term(model.diffusion(t, x, Xek, uek), dW[:, k])
        stack = np.stack(
            [
                Xe_next,
                _first_variation_increment(c, Y[:, k], dW[:, k], dt, form),
                _second_variation_increment(c, Y[:, k], Z[:, k], dW[:, k], dt),
            ]
        )
        Xe_vals[:, k + 1], Y[:, k + 1], Z[:, k + 1] = basis.semigroup(stack, dt)
    Xe = StatePath(basis, grid, X.knots, Xe_vals, ue_all, ids)
    return VariationBundle(X, Xe, Y, Z, deltas, (sc.k0, sc.k1))


def _stored_coefficients(model, X: StatePath, grid, basis):
    x = basis.points
    return lambda k, deriv, which: which(k * grid.dt, x, X.values[:, k], X.controls[:, k], deriv)


def first_variation(model, u, s, w, grid, basis, form: str = "mild") -> np.ndarray:
    """``Y^eps`` through the generic linear solver.

    Coefficients: ``a = b'``, ``b_j = sigma_j'``, ``beta_j = delta sigma_j`` and
    ``alpha = delta b`` (mild form) or ``0`` (differential form).
    """
    if form not in FORMS:
        raise ValueError(f"form must be one of {FORMS}")
    bundle = variation_bundle(model, u, s, w, grid, basis, form)
    coef = _stored_coefficients(model, bundle.X, grid, basis)
    d = bundle.deltas
    spec = LinearSPDESpec(
        a=lambda k: coef(k, 1, model.drift),
        alpha=lambda k: d["db"][:, k] if form == "mild" else None,
        b=lambda k: coef(k, 1, model.diffusion),
        beta=lambda k: np.moveaxis(d["dsigma"][:, k], 1, 0),
    )
    return solve_linear(spec, w, grid, basis)


def second_variation(model, u, s, w, grid, basis, Y: np.ndarray) -> np.ndarray:
    """``Z^eps`` through the generic linear solver given ``Y^eps`` on the same noise."""
    bundle = variation_bundle(model, u, s, w, grid, basis)
    coef = _stored_coefficients(model, bundle.X, grid, basis)
    d = bundle.deltas
    spec = LinearSPDESpec(
        a=lambda k: coef(k, 1, model.drift),
        alpha=lambda k: 0.5 * coef(k, 2, model.drift) * Y[:, k] ** 2 + d["db"][:, k] + d["db1"][:, k] * Y[:, k],
        b=lambda k: coef(k, 1, model.diffusion),
        beta=lambda k: 0.5 * coef(k, 2, model.diffusion) * Y[:, k] ** 2
        + np.moveaxis(d["dsigma1"][:, k], 1, 0) * Y[:, k],
    )
    return solve_linear(spec, w, grid, basis)


# -- streaming sweep ---------------------------------------------------------


def triple_norm(moment_sums: np.ndarray, n_samples: int, p: float) -> float:
    """``max_k (mean ||V_k||_p^p)^{1/p}`` from per-knot sums of ``||V_k||_p^p``."""
    return float((moment_sums / n_samples).max() ** (1.0 / p))


@dataclass
class SweepRow:
    """Per-epsilon summary of a spike-variation sweep."""

    epsilon: float
    norm_Y_4: float
    norm_Y_2: float
    norm_Z_2: float
    residual: float
    J_diff: float
    J_diff_se: float
    expansion: float
    expansion_gap: float
    expansion_gap_se: float
    expansion_adjoint: float = np.nan
    adjoint_gap: float = np.nan
    adjoint_gap_se: float = np.nan
    duality1_lhs: float = np.nan
    duality1_rhs: float = np.nan
    duality1_gap: float = np.nan
    duality1_gap_se: float = np.nan
    duality2_lhs: float = np.nan
    duality2_rhs: float = np.nan
    duality2_gap: float = np.nan
    duality2_gap_se: float = np.nan
    norm_Y_4_se: float = np.nan
    norm_Z_2_se: float = np.nan
    residual_se: float = np.nan


_PER_PATH = (
    "J_diff",
    "expansion",
    "expansion_adjoint",
    "duality1_lhs",
    "duality1_rhs",
    "duality2_lhs",
    "duality2_rhs",
)
_PER_KNOT = ("Y4", "Y2", "Z2", "R2")


def _sweep_chunk(model, control, v_control, windows, dW, grid, basis, ids, adjoint, form, k_start):
    """Stream one chunk; returns per-path arrays and per-knot moment sums."""
    N = dW.shape[0]
    n, dt, x = grid.n_steps, grid.dt, basis.points
    E = len(windows)
    k0 = min(w[0] for w in windows)
    per_path = {name: np.zeros((E, N)) for name in _PER_PATH}
    per_knot = {name: np.zeros((E, n + 1)) for name in _PER_KNOT}
    per_knot_sq = {name: np.zeros((E, n + 1)) for name in _PER_KNOT}

    steps = state_steps(model, control, dW, grid, basis, ids)
    for k, X, u in steps:
        if k == k0:
            break
    Xe = np.repeat(X[None], E, axis=0)
    Y = np.zeros((E, N, basis.n_points))
    Z = np.zeros_like(Y)

    def record(k, X, Xe, Y, Z):
        R = Xe - X[None] - Y - Z
        for name, val in (("Y4", basis.lp_norm_pow(Y, 4)), ("Y2", basis.lp_norm_pow(Y, 2)),
                          ("Z2", basis.lp_norm_pow(Z, 2)), ("R2", basis.lp_norm_pow(R, 2))):
            per_knot[name][:, k] += val.sum(axis=1)
            per_knot_sq[name][:, k] += (val * val).sum(axis=1)

    for k, X, u in _chain_first(k0, X, u, steps):
        record(k, X, Xe, Y, Z)
        if u is None:
            h0, h1, h2 = (model.terminal(x, X, j) for j in range(3))
            for e in range(E):
                per_path["J_diff"][e] += basis.integrate(model.terminal(x, Xe[e]) - h0)
                lin = basis.integrate(h1 * (Y[e] + Z[e]))
                quad = 0.5 * basis.integrate(h2 * Y[e] ** 2)
                per_path["expansion"][e] += lin + quad
                per_path["expansion_adjoint"][e] += quad
                per_path["duality1_lhs"][e] += basis.integrate(h1 * Y[e])
                per_path["duality2_lhs"][e] += basis.integrate(h1 * Z[e])
            break
        t = k * dt
        v = _checked_actions(model, v_control, k, X, ids) if any(a <= k < b for a, b in windows) else None
        c_out = _Coefficients(model, t, x, X, u)
        c_in = _Coefficients(model, t, x, X, u, v) if v is not None else None
        l0 = model.running(t, x, X, u)
        if adjoint is not None:
            p_prop, q = adjoint.coefficients(k, X)
        incrs = []
        for e, (a, b) in enumerate(windows):
            inside = a <= k < b
            c = c_in if inside else c_out
            ue = v if inside else u
            per_path["J_diff"][e] += dt * basis.integrate(model.running(t, x, Xe[e], ue) - l0)
            Ye, Ze = Y[e], Z[e]
            Y2 = 0.5 * Ye * Ye
            lin = basis.integrate(c.l1 * (Ye + Ze))
            quad = basis.integrate(c.l2 * Y2)
            first = basis.integrate(c.dl) if inside else 0.0
            per_path["expansion"][e] += dt * (first + lin + quad)
            per_path["duality1_lhs"][e] += dt * basis.integrate(c.l1 * Ye)
            per_path["duality2_lhs"][e] += dt * basis.integrate(c.l1 * Ze)
            if adjoint is not None:
                curv = c.l2 + p_prop * c.b2 + np.sum(q * c.s2, axis=0)
                adj = first + basis.integrate(curv * Y2)
                rhs2 = p_prop * (c.b2 * Y2) + np.sum(q * c.s2 * Y2[None], axis=0)
                if inside:
                    qds = basis.integrate(np.sum(q * c.ds, axis=0))
                    adj = adj + basis.integrate(p_prop * c.db) + qds
                    per_path["duality1_rhs"][e] += dt * qds
                    rhs2 = rhs2 + p_prop * (c.db + c.db1 * Ye) + np.sum(q * c.ds1 * Ye[None], axis=0)
                per_path["expansion_adjoint"][e] += dt * adj
                per_path["duality2_rhs"][e] += dt * basis.integrate(rhs2)
            drift_e = model.drift(t, x, Xe[e], ue)
            noise_e = model.diffusion(t, x, Xe[e], ue)
            dWk = dW[:, k]
            incrs.append(Xe[e] + drift_e * dt + noise_term(noise_e, dWk))
            incrs.append(_first_variation_increment(c, Ye, dWk, dt, form))
            incrs.append(_second_variation_increment(c, Ye, Ze, dWk, dt))
        out = basis.semigroup(np.stack(incrs), dt)
        Xe, Y, Z = out[0::3], out[1::3], out[2::3]
        if not (np.isfinite(Xe).all() and np.isfinite(Y).all() and np.isfinite(Z).all()):
            from .engine import SimulationError

            raise SimulationError(f"non-finite variation fields at knot {k + 1}, samples {ids[:5].tolist()}")
    return per_path, per_knot, per_knot_sq


def _chain_first(k, X, u, rest):
    yield k, X, u
    yield from rest


def variation_sweep(
    model: ProblemModel,
    control: ControlPath,
    t0: float,
    v: ControlPath | float,
    eps_values: Sequence[float],
    n_samples: int,
    grid: TimeGrid,
    basis: SpectralBasis,
    seeds: SeedPolicy,
    adjoint=None,
    form: str = "mild",
    chunk: int = 250,
    threads: int = 1,
    start: int = 0,
) -> list[SweepRow]:
    """Stream ``X, X^eps, Y^eps, Z^eps`` for several window lengths on shared noise.

    Returns one :class:`SweepRow` per epsilon with the triple norms of ``Y``
    (p = 2, 4), ``Z`` (p = 2) and of the expansion residual, the cost
    difference, the preliminary expansion and, when ``adjoint`` is given, the
    adjoint form of the expansion and both duality pairings.

    ``adjoint`` must provide ``coefficients(k, X) -> (p, q)`` where ``p`` is
    the conditional expectation of the propagated adjoint (the quantity the
    discrete duality pairs with) and ``q`` has a leading noise axis.
    """
    if form not in FORMS:
        raise ValueError(f"form must be one of {FORMS}")
    if n_samples < 2:
        raise ValueError("need at least 2 samples")
    eps_values = [float(e) for e in eps_values]
    if min(eps_values) < 4 * grid.dt * (1 - 1e-9):
        raise ValueError(f"smallest eps {min(eps_values)} must be >= 4 dt = {4 * grid.dt}")
    specs = [SpikeSpec(t0, e, v) for e in eps_values]
    windows = [s.window(grid) for s in specs]
    if len({w[0] for w in windows}) != 1:
        raise ValueError("all windows must share the start knot")
    v_control = specs[0].v
    n, E = grid.n_steps, len(eps_values)

    def run(a, b):
        dW = sample_increments(seeds, grid, model.d, b - a, start=start + a)
        return _sweep_chunk(model, control, v_control, windows, dW, grid, basis,
                            np.arange(start + a, start + b), adjoint, form, windows[0][0])

    parts = map_chunks(run, n_samples, chunk, threads, concat=False)
    per_path = {name: np.concatenate([pp[name] for pp, _, _ in parts], axis=1) for name in _PER_PATH}
    moments = np.zeros((E, len(_PER_KNOT), 2, n + 1))
    for _, pk, pk2 in parts:
        for j, name in enumerate(_PER_KNOT):
            moments[:, j, 0] += pk[name]
            moments[:, j, 1] += pk2[name]
    rows = []
    N = n_samples
    for e, eps in enumerate(eps_values):
        norms, ses = {}, {}
        for j, (name, p) in enumerate(zip(_PER_KNOT, (4, 2, 2, 2))):
            s1, s2 = moments[e, j]
            mean = s1 / N
            kmax = int(np.argmax(mean))
            norms[name] = float(mean[kmax] ** (1.0 / p))
            var = max(s2[kmax] / N - mean[kmax] ** 2, 0.0) * N / (N - 1)
            se_mean = np.sqrt(var / N)
            ses[name] = float(se_mean / (p * mean[kmax] ** ((p - 1.0) / p))) if mean[kmax] > 0 else 0.0
        jd = per_path["J_diff"][e]
        ex = per_path["expansion"][e]
        row = SweepRow(
            epsilon=eps,
            norm_Y_4=norms["Y4"],
            norm_Y_2=norms["Y2"],
            norm_Z_2=norms["Z2"],
            residual=norms["R2"],
            J_diff=float(jd.mean()),
            J_diff_se=_se(jd),
            expansion=float(ex.mean()),
            expansion_gap=float((jd - ex).mean()),
            expansion_gap_se=_se(jd - ex),
            norm_Y_4_se=ses["Y4"],
            norm_Z_2_se=ses["Z2"],
            residual_se=ses["R2"],
        )
        if adjoint is not None:
            ea = per_path["expansion_adjoint"][e]
            d1 = per_path["duality1_lhs"][e] - per_path["duality1_rhs"][e]
            d2 = per_path["duality2_lhs"][e] - per_path["duality2_rhs"][e]
            row.expansion_adjoint = float(ea.mean())
            row.adjoint_gap = float((jd - ea).mean())
            row.adjoint_gap_se = _se(jd - ea)
            row.duality1_lhs = float(per_path["duality1_lhs"][e].mean())
            row.duality1_rhs = float(per_path["duality1_rhs"][e].mean())
            row.duality1_gap = float(d1.mean())
            row.duality1_gap_se = _se(d1)
            row.duality2_lhs = float(per_path["duality2_lhs"][e].mean())
            row.duality2_rhs = float(per_path["duality2_rhs"][e].mean())
            row.duality2_gap = float(d2.mean())
            row.duality2_gap_se = _se(d2)
        rows.append(row)
    return rows


def _se(values: np.ndarray) -> float:
    return float(values.std(ddof=1) / np.sqrt(len(values)))


def expansion_residual(model, control, t0, v, eps_values, n_samples, grid, basis, seeds, **kw) -> dict:
    """Residual norm ``sup_t (E||X^eps - X - Y - Z||_2^2)^{1/2}`` per epsilon with a slope fit."""
    from .smp import rate_estimate

    rows = variation_sweep(model, control, t0, v, eps_values, n_samples, grid, basis, seeds, **kw)
    table = [(r.epsilon, r.residual) for r in rows]
    norm = max(r.residual for r in rows)
    fit = rate_estimate(table) if all(r.residual > 0 for r in rows) and len(rows) >= 4 else None
    return {"norm": norm, "table": table, "fit": fit, "rows": rows}


def cost_expansion(model, control, s: SpikeSpec, n_samples, grid, basis, seeds, adjoint=None, **kw) -> dict:
    """Cost difference against its preliminary and (optionally) adjoint expansions."""
    row = variation_sweep(model, control, s.t0, s.v, [s.eps], n_samples, grid, basis, seeds,
                          adjoint=adjoint, **kw)[0]
    out = {
        "lhs": row.J_diff,
        "lhs_se": row.J_diff_se,
        "rhs_prelim": row.expansion,
        "gap_prelim": row.expansion_gap,
        "gap_prelim_se": row.expansion_gap_se,
    }
    if adjoint is not None:
        out.update(rhs_adjoint=row.expansion_adjoint, gap_adjoint=row.adjoint_gap,
                   gap_adjoint_se=row.adjoint_gap_se)
    return out
