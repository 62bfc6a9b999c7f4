"""Hamiltonian, the maximum-principle test, the quadratic duality, and rate fits."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .adjoint import FirstAdjoint, SecondAdjointForm, _curvature_at
from .engine import (
    ConstantControl,
    ControlPath,
    OpenLoopControl,
    _checked_actions,
    map_chunks,
    noise_term,
    path_costs,
    state_steps,
)
from .models import ProblemModel
from .spectral import SpectralBasis, SpectralField
from .stochastics import SeedPolicy, TimeGrid, branch_increments, sample_increments
from .variation import SpikeSpec, _first_variation_increment, _Coefficients

__all__ = [
    "hamiltonian",
    "hamiltonian_values",
    "RateEstimator",
    "rate_estimate",
    "MPRow",
    "MPReport",
    "mp_statistic",
    "check_mp",
    "ControlCandidate",
    "brute_force_controls",
    "final_duality_check",
    "ADJOINT_SAMPLE_OFFSET",
]

# Training paths of the regression use sample indices from here on, so they
# never coincide with the outer paths of a test.
ADJOINT_SAMPLE_OFFSET = 1_000_000


def hamiltonian_values(model: ProblemModel, t, x, X, v, p, q, basis: SpectralBasis) -> np.ndarray:
    """Batched ``int_D [l + b p + sum_j sigma_j q^j]`` for ``X, p`` ``(N, P)`` and ``q`` ``(d, N, P)``."""
    dens = model.running(t, x, X, v) + model.drift(t, x, X, v) * p
    dens = dens + np.sum(model.diffusion(t, x, X, v) * q, axis=0)
    return basis.integrate(dens)


def hamiltonian(t: float, v: float, X: SpectralField, p: SpectralField, q: Sequence[SpectralField],
                model: ProblemModel) -> float:
    """Hamiltonian of a single state for the action ``v``."""
    basis = X.basis
    for f in (p, *q):
        X._check_same(f)
    if len(q) != model.d:
        raise ValueError(f"expected {model.d} q fields, got {len(q)}")
    qv = np.stack([f.grid_values for f in q])[:, None]
    val = hamiltonian_values(model, t, basis.points, X.grid_values[None], np.array([float(v)]),
                             p.grid_values[None], qv, basis)
    return float(val[0])


# -- rates --------------------------------------------------------------------


class RateEstimator(BaseEstimator):
    """Least-squares fit of ``log value = intercept + slope * log eps``."""

    def __init__(self, min_points: int = 4):
        self.min_points = min_points

    def fit(self, eps, values):
        eps = np.asarray(eps, dtype=float)
        values = np.asarray(values, dtype=float)
        if eps.shape != values.shape or eps.ndim != 1:
            raise ValueError("eps and values must be 1-d arrays of equal length")
        if len(eps) < self.min_points:
            raise ValueError(f"need at least {self.min_points} points, got {len(eps)}")
        if np.any(values <= 0) or np.any(eps <= 0):
            raise ValueError("rate fits need positive eps and values")
        lx, ly = np.log(eps), np.log(values)
        self.slope_, self.intercept_ = np.polyfit(lx, ly, 1)
        resid = ly - (self.intercept_ + self.slope_ * lx)
        ss_tot = np.sum((ly - ly.mean()) ** 2)
        self.r2_ = float(1.0 - np.sum(resid**2) / ss_tot) if ss_tot > 0 else 1.0
        return self

    def predict(self, eps):
        return np.exp(self.intercept_ + self.slope_ * np.log(np.asarray(eps, dtype=float)))


def rate_estimate(table) -> dict:
    """``{slope, intercept, r2}`` for ``(eps, value)`` pairs."""
    eps, values = np.asarray(table, dtype=float).T
    est = RateEstimator().fit(eps, values)
    return {"slope": float(est.slope_), "intercept": float(est.intercept_), "r2": est.r2_}


# -- maximum principle ---------------------------------------------------------


@dataclass
class MPRow:
    t: float
    knot: int
    sample_id: int
    u: float
    v: float
    dH: float
    quad: float
    total: float
    std_error: float
    quad_se: float
    dH_se: float


@dataclass
class MPReport:
    rows: list
    violation_fraction: float
    threshold: float
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "violation_fraction": self.violation_fraction,
            "threshold": self.threshold,
            "config": self.config,
            "samples": [asdict(r) for r in self.rows],
        }


def mp_statistic(k, X_k, u_k, sample_ids, model, adjoint: FirstAdjoint, form: SecondAdjointForm,
                 grid: TimeGrid, basis: SpectralBasis) -> list[MPRow]:
    """Rows ``(dH, quad, total)`` for every action in ``U`` at knot ``k`` and the given outer states.

    ``dH`` is the Hamiltonian difference with the adjoint ``p_k`` and ``q_k``;
    ``quad = 1/2 sum_j <P_k dsigma_j, dsigma_j>``.  The standard error
    combines the branch spread of ``quad`` with the regression error of the
    ``q`` term when the adjoint kept its covariance at ``k``.
    """
    X_k = np.atleast_2d(X_k)
    S, d = X_k.shape[0], model.d
    x, t = basis.points, k * grid.dt
    u_k = np.asarray(u_k, dtype=float)
    p = adjoint.predict(X_k, k, sample_ids)
    _, q = adjoint.coefficients(k, X_k)
    H_u = hamiltonian_values(model, t, x, X_k, u_k, p, q, basis)
    sig_u = model.diffusion(t, x, X_k, u_k)
    actions = model.actions
    fields = np.empty((S, len(actions) * d, basis.n_points))
    dsig = {}
    for i, v in enumerate(actions):
        vv = np.full(S, v)
        dsig[v] = model.diffusion(t, x, X_k, vv) - sig_u  # (d, S, P)
        fields[:, i * d:(i + 1) * d] = np.moveaxis(dsig[v], 0, 1)
    branches = form.gram(k, X_k, sample_ids, fields, return_branches=True)  # (S, M, F, F)
    M = branches.shape[1]
    rows = []
    for i, v in enumerate(actions):
        vv = np.full(S, v)
        dH = hamiltonian_values(model, t, x, X_k, vv, p, q, basis) - H_u
        sl = slice(i * d, (i + 1) * d)
        per_branch = 0.5 * np.einsum("smjj->sm", branches[:, :, sl, sl])
        quad = per_branch.mean(axis=1)
        quad_se = per_branch.std(axis=1, ddof=1) / np.sqrt(M)
        if k in getattr(adjoint, "q_covariance_", {}):
            dH_se = adjoint.q_linear_se(k, X_k, dsig[v])
        else:
            dH_se = np.zeros(S)
        same = vv == u_k
        for s in range(S):
            if same[s]:
                # identical actions: every term vanishes exactly
                rows.append(MPRow(t, k, int(sample_ids[s]), float(u_k[s]), float(v), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0))
                continue
            se = float(np.hypot(quad_se[s], dH_se[s]))
            rows.append(MPRow(t, k, int(sample_ids[s]), float(u_k[s]), float(v), float(dH[s]), float(quad[s]),
                              float(dH[s] + quad[s]), se, float(quad_se[s]), float(dH_se[s])))
    return rows


def mp_knots(grid: TimeGrid, n_knots: int) -> list[int]:
    """``n_knots`` interior knots spread evenly over ``(0, T)``."""
    ks = np.linspace(0, grid.n_steps, n_knots + 2)[1:-1]
    return sorted({int(round(k)) for k in ks})


def check_mp(
    model: ProblemModel,
    candidate: ControlPath,
    grid: TimeGrid,
    basis: SpectralBasis,
    seeds: SeedPolicy,
    n_adjoint: int = 2000,
    n_knots: int = 8,
    n_outer: int = 16,
    n_branches: int = 256,
    threshold: float = 3.0,
    n_reg: int = 4,
    adjoint: FirstAdjoint | None = None,
) -> MPReport:
    """Maximum-principle statistics over sampled knots, outer paths and all actions."""
    knots = mp_knots(grid, n_knots)
    if adjoint is None:
        adjoint = FirstAdjoint(model, candidate, grid, basis, n_reg=n_reg, covariance_knots=knots)
        dW = sample_increments(seeds, grid, model.d, n_adjoint, start=ADJOINT_SAMPLE_OFFSET)
        adjoint.fit(dW, np.arange(ADJOINT_SAMPLE_OFFSET, ADJOINT_SAMPLE_OFFSET + n_adjoint))
    form = SecondAdjointForm(model, candidate, grid, basis, adjoint, seeds, n_branches)
    ids = np.arange(n_outer)
    dW = sample_increments(seeds, grid, model.d, n_outer)
    states = {}
    for k, X, u in state_steps(model, candidate, dW, grid, basis, ids):
        if k in knots:
            states[k] = (X, u)
    rows = []
    for k in knots:
        X, u = states[k]
        rows.extend(mp_statistic(k, X, u, ids, model, adjoint, form, grid, basis))
    viol = sum(r.total < -threshold * r.std_error for r in rows)
    config = dict(n_adjoint=n_adjoint, n_knots=n_knots, n_outer=n_outer, n_branches=n_branches,
                  threshold=threshold, knots=knots, ridge_knots=len(adjoint.ridge_knots_))
    return MPReport(rows, viol / len(rows), threshold, config)


# -- brute-force optimum --------------------------------------------------------


@dataclass
class ControlCandidate:
    label: str
    control: ControlPath
    J: float
    std_error: float
    diff_to_best: float = 0.0
    diff_se: float = 0.0


def brute_force_controls(
    model: ProblemModel,
    grid: TimeGrid,
    basis: SpectralBasis,
    seeds: SeedPolicy,
    n_samples: int,
    switch_time: float | None = None,
    chunk: int = 250,
    threads: int = 1,
) -> list[ControlCandidate]:
    """Costs of every constant and two-piece control on common random numbers.

    Returns the candidates sorted by estimated cost, with paired differences
    to the best one.
    """
    switch_time = grid.T / 2 if switch_time is None else switch_time
    cands = {}
    for a in model.actions:
        cands[f"const({a:g})"] = ConstantControl(a)
    for a in model.actions:
        for b in model.actions:
            if a != b:
                cands[f"switch({a:g}->{b:g}@{switch_time:g})"] = OpenLoopControl.two_piece(grid, a, b, switch_time)
    samples = {}
    for label, ctrl in cands.items():
        def run(s, e, ctrl=ctrl):
            dW = sample_increments(seeds, grid, model.d, e - s, start=s)
            return path_costs(model, ctrl, dW, grid, basis, np.arange(s, e))

        samples[label] = map_chunks(run, n_samples, chunk, threads)
    means = {k: float(v.mean()) for k, v in samples.items()}
    best = min(means, key=means.get)
    out = []
    for label, ctrl in cands.items():
        diff = samples[label] - samples[best]
        out.append(ControlCandidate(label, ctrl, means[label],
                                    float(samples[label].std(ddof=1) / np.sqrt(n_samples)),
                                    float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(n_samples))))
    return sorted(out, key=lambda c: c.J)


# -- quadratic (second-order) duality -------------------------------------------


def _flow_step(model, basis, t, x, X, u, Y, dWk, dt):
    """Linearised flow step for a stack of fields ``Y`` ``(F, N, P)`` along ``X``."""
    b1 = model.drift(t, x, X, u, 1)
    s1 = model.diffusion(t, x, X, u, 1)
    noise = np.stack([noise_term(s1 * Yf[None], dWk) for Yf in Y])
    return Y + b1[None] * Y * dt + noise


def _final_duality_chunk(model, control, adjoint, v_control, windows, dW, grid, basis, seeds, ids, form):
    """Per-path estimates for every window; returns dict of ``(E, N)`` arrays."""
    N, d = dW.shape[0], model.d
    n, dt, x = grid.n_steps, grid.dt, basis.points
    E = len(windows)
    k0 = windows[0][0]
    out = {name: np.zeros((E, N)) for name in ("L", "cv", "Qb_corr", "Qm", "gap")}

    # per window: branch plans.  kind 0: from k0 (control variate), kind 1,2: central knots
    plans = []
    for e, (a, b) in enumerate(windows):
        m = b - a
        centres = [a + m // 2 - 1, a + m // 2] if m >= 2 and m % 2 == 0 else [a + m // 2] * 2
        plans.append([(a, b, 3 * e), (centres[0], b, 3 * e + 1), (centres[1], b, 3 * e + 2)])

    fresh = {}
    for e, plan in enumerate(plans):
        for start, stop, tag_idx in plan:
            fresh[tag_idx] = np.stack([
                branch_increments(seeds, grid, d, int(s), start, [tag_idx], tag="quadratic-duality")[0, : stop - start]
                for s in ids
            ])

    steps = state_steps(model, control, dW, grid, basis, ids)
    for k, X, u in steps:
        if k == k0:
            break
    main = [(k, X, u)]
    # Branch states and flows.  Each branch: dict(X, Y (d, N, P), acc (N, d, d), start, stop, fresh)
    branches = {e: [] for e in range(E)}
    Yeps = np.zeros((E, N, basis.n_points))
    L = np.zeros((E, N))
    win_dW = np.zeros((E, N, d))
    from itertools import chain

    for k, X, u in chain(main, steps):
        t = k * dt
        # start branches whose knot is k
        for e, plan in enumerate(plans):
            for start, stop, tag_idx in plan:
                if start == k:
                    ds = model.diffusion(t, x, X, _checked_actions(model, v_control, k, X, ids)) \
                        - model.diffusion(t, x, X, u)
                    branches[e].append({
                        "X": X.copy(), "Y": None, "init": ds, "acc": np.zeros((N, d, d)),
                        "start": start, "stop": stop, "fresh": fresh[tag_idx], "tag": tag_idx,
                    })
        if u is None:
            hb = model.terminal(x, X, 2)
            for e in range(E):
                L[e] += basis.integrate(hb * Yeps[e] ** 2)
            for e in range(E):
                for br in branches[e]:
                    Yb = br["Y"]
                    hbb = model.terminal(x, br["X"], 2)
                    for i in range(d):
                        for j in range(d):
                            br["acc"][:, i, j] += basis.integrate(hbb * Yb[i] * Yb[j])
            break
        # curvature on the main path (knots after the window start)
        if k > k0:
            Hb = _curvature_at(model, adjoint, k, t, x, X, u)
            for e in range(E):
                L[e] += dt * basis.integrate(Hb * Yeps[e] ** 2)
        # main first variation
        v_act = None
        c_out = _Coefficients(model, t, x, X, u)
        incrs = []
        for e, (a, b) in enumerate(windows):
            inside = a <= k < b
            if inside:
                if v_act is None:
                    v_act = _checked_actions(model, v_control, k, X, ids)
                    c_in = _Coefficients(model, t, x, X, u, v_act)
                c = c_in
                win_dW[e] += dW[:, k]
            else:
                c = c_out
            incrs.append(_first_variation_increment(c, Yeps[e], dW[:, k], dt, form))
        Yeps = basis.semigroup(np.stack(incrs), dt)
        # branches
        for e in range(E):
            for br in branches[e]:
                Xb = br["X"]
                ub = _checked_actions(model, control, k, Xb, ids)
                if br["Y"] is not None:
                    Hb = _curvature_at(model, adjoint, k, t, x, Xb, ub)
                    Yb = br["Y"]
                    for i in range(d):
                        for j in range(d):
                            br["acc"][:, i, j] += dt * basis.integrate(Hb * Yb[i] * Yb[j])
                    Ynext = basis.semigroup(_flow_step(model, basis, t, x, Xb, ub, Yb, _inc(br, k, dW), dt), dt)
                else:
                    Ynext = basis.semigroup(br["init"], dt)
                dWb = _inc(br, k, dW)
                br["X"] = basis.semigroup(Xb + model.drift(t, x, Xb, ub) * dt
                                          + noise_term(model.diffusion(t, x, Xb, ub), dWb), dt)
                br["Y"] = Ynext

    for e, (a, b) in enumerate(windows):
        eps = (b - a) * dt
        Qb, Qm1, Qm2 = (br["acc"] for br in branches[e])
        w = win_dW[e]
        cv = np.einsum("ni,nj,nij->n", w, w, Qb) - eps * np.einsum("nii->n", Qb)
        Qm = 0.5 * (np.einsum("nii->n", Qm1) + np.einsum("nii->n", Qm2))
        out["L"][e] = L[e]
        out["cv"][e] = cv
        out["Qm"][e] = eps * Qm
        out["gap"][e] = L[e] - cv - eps * Qm
    return out


def _inc(br, k, dW):
    if k < br["stop"]:
        return br["fresh"][:, k - br["start"]]
    return dW[:, k]


def final_duality_check(
    model: ProblemModel,
    control: ControlPath,
    adjoint: FirstAdjoint,
    t0: float,
    v,
    eps_values: Sequence[float],
    n_samples: int,
    grid: TimeGrid,
    basis: SpectralBasis,
    seeds: SeedPolicy,
    form: str = "mild",
    chunk: int = 250,
    threads: int = 1,
) -> list[dict]:
    """Per-epsilon comparison of the curvature pairing of ``Y^eps`` with the second-order form.

    ``lhs`` estimates ``E[sum_k dt <Hbar Y, Y> + <hbar Y_T, Y_T>]`` and ``rhs``
    estimates ``sum_{k in window} dt E<P_k dsigma, dsigma>`` by the form at the
    central window knots (one branch per path).  ``gap`` is estimated with a
    control variate: the pairing recomputed on a branch whose window noise is
    fresh, weighted by ``(dW_win dW_win^T - eps I)``, which has mean zero and
    removes the leading fluctuation of ``lhs``.
    """
    eps_values = [float(e) for e in eps_values]
    specs = [SpikeSpec(t0, e, v) for e in eps_values]
    windows = [s.window(grid) for s in specs]
    if len({w[0] for w in windows}) != 1:
        raise ValueError("all windows must share the start knot")

    def run(a, b):
        dW = sample_increments(seeds, grid, model.d, b - a, start=a)
        return _final_duality_chunk(model, control, adjoint, specs[0].v, windows, dW, grid, basis, seeds,
                                    np.arange(a, b), form)

    parts = map_chunks(run, n_samples, chunk, threads, concat=False)
    res = {name: np.concatenate([p[name] for p in parts], axis=1) for name in parts[0]}
    rows = []
    se = lambda v: float(v.std(ddof=1) / np.sqrt(len(v)))
    for e, eps in enumerate(eps_values):
        lhs, rhs, gap = res["L"][e], res["Qm"][e], res["gap"][e]
        rows.append({
            "epsilon": eps,
            "lhs": float(lhs.mean()), "lhs_se": se(lhs),
            "rhs": float(rhs.mean()), "rhs_se": se(rhs),
            "gap": float(gap.mean()), "gap_se": se(gap),
            "naive_gap": float(lhs.mean() - rhs.mean()),
            "naive_gap_se": float(np.hypot(se(lhs), se(rhs))),
        })
    return rows
