"""First adjoint by least-squares Monte Carlo and the second-order bilinear form.

Backward recursion (left-point, conditional expectations by regression)::

    p_n       = h'(X_n)
    ptilde_k  = E_k[ S p_{k+1} ]
    q_k^j     = E_k[ (S p_{k+1} - ptilde_k) dW_k^j ] / dt
    p_k       = ptilde_k + dt (b'_k ptilde_k + sum_j sigma_j'_k q_k^j + l'_k)

with ``S = e^{dt A}``.  For the exponential-Euler forward scheme this is the
exact discrete dual: ``E[<h', Y_n> + sum_k dt <l'_k, Y_k>]`` equals
``sum_k dt E[<ptilde_k, alpha_k> + <q_k, beta_k>]`` for any linear equation
driven by ``alpha, beta``, up to the regression error.  Subtracting
``ptilde_k`` in the ``q`` target leaves its mean unchanged and removes most of
the variance.

The second-order form ``<P_k f, g>`` is evaluated by branching: fresh futures
are drawn from the state at knot ``k``, the linearised flow started from ``f``
and ``g`` is run along each branch, and the curvature pairing is averaged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .engine import ControlPath, _checked_actions, noise_term, state_steps
from .models import ProblemModel
from .spectral import SpectralBasis
from .stochastics import SeedPolicy, TimeGrid, branch_increments, sample_increments

__all__ = [
    "polynomial_features",
    "FirstAdjoint",
    "AdjointPath",
    "CurvatureFields",
    "curvature",
    "SecondAdjointForm",
    "second_adjoint_eval",
    "duality_checks",
    "forward_dual",
    "flow_moments",
    "flow_estimates_check",
]


def polynomial_features(lead: np.ndarray, mean: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """``[1, z_i, z_i z_j (i <= j)]`` of standardised leading mode coefficients.

    Columns whose scale is zero (a deterministic coefficient) are set to zero.
    """
    safe = np.where(scale > 0, scale, 1.0)
    z = np.where(scale > 0, (lead - mean) / safe, 0.0)
    n = z.shape[1]
    iu, ju = np.triu_indices(n)
    return np.concatenate([np.ones((len(z), 1)), z, z[:, iu] * z[:, ju]], axis=1)


def _n_features(n_reg: int) -> int:
    return 1 + n_reg + n_reg * (n_reg + 1) // 2


class FirstAdjoint(BaseEstimator):
    """Least-squares Monte Carlo solver for the first adjoint pair ``(p, q)``.

    Parameters
    ----------
    model, control, grid, basis
        Problem, control under which the adjoint is computed, and discretisation.
    n_reg : int
        Number of leading mode coefficients of ``X_k`` used as regressors.
    ridge : float
        Relative ridge parameter used when the feature matrix is rank deficient.
    checkpoint_every : int
        States are stored every this many knots during the forward pass and
        recomputed segment by segment during the backward sweep.
    covariance_knots : sequence of int
        Knots at which the regression covariance of ``q`` is kept, for
        standard errors of quantities linear in ``q``.

    Attributes
    ----------
    coef_p_ : ndarray, shape (n_steps, n_features, n_modes)
    coef_q_ : ndarray, shape (n_steps, d, n_features, n_modes)
    feature_mean_, feature_scale_ : ndarray, shape (n_steps, n_reg)
    ridge_knots_ : dict
        Knot -> ridge parameter actually used, for rank-deficient fits.
    """

    def __init__(
        self,
        model: ProblemModel = None,
        control: ControlPath = None,
        grid: TimeGrid = None,
        basis: SpectralBasis = None,
        n_reg: int = 4,
        ridge: float = 1e-8,
        checkpoint_every: int = 32,
        covariance_knots: Sequence[int] = (),
    ):
        self.model = model
        self.control = control
        self.grid = grid
        self.basis = basis
        self.n_reg = n_reg
        self.ridge = ridge
        self.checkpoint_every = checkpoint_every
        self.covariance_knots = covariance_knots

    # -- fitting -------------------------------------------------------------

    def _regress(self, k, F, targets):
        """Solve the least-squares problems sharing the design ``F``."""
        rank = np.linalg.matrix_rank(F)
        if rank == F.shape[1]:
            coef = np.linalg.lstsq(F, targets, rcond=None)[0]
            gram = F.T @ F
        else:
            gram = F.T @ F
            lam = self.ridge * max(np.trace(gram) / F.shape[1], 1e-300)
            self.ridge_knots_[k] = lam
            gram = gram + lam * np.eye(F.shape[1])
            coef = np.linalg.solve(gram, F.T @ targets)
        return coef, gram

    def fit(self, dW: np.ndarray, sample_ids=None):
        """Run the forward pass on increments ``(N, n_steps, d)`` and the backward sweep."""
        model, grid, basis = self.model, self.grid, self.basis
        dW = np.asarray(dW, dtype=float)
        N, n = dW.shape[0], grid.n_steps
        if N < 2 * _n_features(self.n_reg):
            raise ValueError(f"need at least {2 * _n_features(self.n_reg)} samples for the regression")
        if self.n_reg > basis.n_modes:
            raise ValueError("n_reg exceeds the number of modes")
        ids = np.arange(N) if sample_ids is None else np.asarray(sample_ids)
        C = int(self.checkpoint_every)
        checkpoints = {}
        for k, X, u in state_steps(model, self.control, dW, grid, basis, ids):
            if k % C == 0 or k == n:
                checkpoints[k] = X

        nf, M, d = _n_features(self.n_reg), basis.n_modes, model.d
        self.coef_p_ = np.zeros((n, nf, M))
        self.coef_q_ = np.zeros((n, d, nf, M))
        self.feature_mean_ = np.zeros((n, self.n_reg))
        self.feature_scale_ = np.zeros((n, self.n_reg))
        self.ridge_knots_ = {}
        self.q_covariance_ = {}
        cov_knots = set(int(k) for k in self.covariance_knots)
        x, dt = basis.points, grid.dt
        p_next = model.terminal(x, checkpoints[n], 1).copy()
        for a in reversed(range(0, n, C)):
            b = min(a + C, n)
            seg = list(state_steps(model, self.control, dW, grid, basis, ids, checkpoints[a], a, b))
            for k in range(b - 1, a - 1, -1):
                _, X, u = seg[k - a]
                lead = basis.to_modes(X)[:, : self.n_reg]
                mean = lead.mean(axis=0)
                scale = lead.std(axis=0)
                scale = np.where(scale > 1e-12 * (1.0 + np.abs(mean)), scale, 0.0)
                self.feature_mean_[k], self.feature_scale_[k] = mean, scale
                F = polynomial_features(lead, mean, scale)
                Sp = basis.semigroup(p_next, dt)
                Sp_modes = basis.to_modes(Sp)
                coef_p, gram = self._regress(k, F, Sp_modes)
                p_fit_modes = F @ coef_p
                resid = Sp_modes - p_fit_modes
                q_targets = np.concatenate([resid * (dW[:, k, j:j + 1] / dt) for j in range(d)], axis=1)
                coef_q, _ = self._regress(k, F, q_targets)
                q_fit_modes = F @ coef_q
                self.coef_p_[k] = coef_p
                self.coef_q_[k] = coef_q.reshape(nf, d, M).transpose(1, 0, 2)
                if k in cov_knots:
                    q_res = q_targets - q_fit_modes
                    dof = max(N - nf, 1)
                    self.q_covariance_[k] = (
                        np.linalg.inv(gram),
                        (q_res.T @ q_res / dof).reshape(d, M, d, M),
                    )
                p_tilde = basis.to_grid(p_fit_modes)
                q = np.stack([basis.to_grid(q_fit_modes[:, j * M:(j + 1) * M]) for j in range(d)])
                p_next = self._propagate(k, X, u, p_tilde, q)
        self.n_samples_ = N
        return self

    def _propagate(self, k, X, u, p_tilde, q):
        model, x, dt = self.model, self.basis.points, self.grid.dt
        t = k * dt
        rhs = model.drift(t, x, X, u, 1) * p_tilde + model.running(t, x, X, u, 1)
        rhs = rhs + np.sum(model.diffusion(t, x, X, u, 1) * q, axis=0)
        return self.basis.project(p_tilde + dt * rhs)

    # -- evaluation ----------------------------------------------------------

    def features(self, k: int, X: np.ndarray) -> np.ndarray:
        lead = self.basis.to_modes(X)[:, : self.n_reg]
        return polynomial_features(lead, self.feature_mean_[k], self.feature_scale_[k])

    def coefficients(self, k: int, X: np.ndarray):
        """``(ptilde_k, q_k)`` as grid values ``(N, P)`` and ``(d, N, P)``."""
        if not 0 <= k < self.grid.n_steps:
            raise ValueError(f"regression functions exist for knots 0..{self.grid.n_steps - 1}")
        F = self.features(k, X)
        p_tilde = self.basis.to_grid(F @ self.coef_p_[k])
        q = self.basis.to_grid(np.einsum("nf,jfm->jnm", F, self.coef_q_[k]))
        return p_tilde, q

    def predict(self, X: np.ndarray, k: int, sample_ids=None) -> np.ndarray:
        """Adjoint ``p_k`` at states ``X``; the terminal knot returns ``h'(X)`` exactly."""
        X = np.atleast_2d(X)
        if k == self.grid.n_steps:
            return np.array(self.model.terminal(self.basis.points, X, 1))
        ids = np.arange(len(X)) if sample_ids is None else np.asarray(sample_ids)
        u = _checked_actions(self.model, self.control, k, X, ids)
        p_tilde, q = self.coefficients(k, X)
        return self._propagate(k, X, u, p_tilde, q)

    def q_linear_se(self, k: int, X: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """Regression standard error of ``sum_j <q_k^j, g_j>`` at states ``X``.

        ``directions`` has shape ``(d, N, P)`` (grid values of ``g_j``).
        """
        if k not in self.q_covariance_:
            raise KeyError(f"no regression covariance kept at knot {k}")
        inv_gram, res_cov = self.q_covariance_[k]
        F = self.features(k, X)
        lev = np.einsum("nf,fg,ng->n", F, inv_gram, F)
        g = self.basis.to_modes(directions)  # (d, N, M)
        quad = np.einsum("jnm,jmio,ino->n", g, res_cov, g)
        return np.sqrt(np.maximum(lev * quad, 0.0))

    def path(self, dW: np.ndarray, sample_ids=None) -> "AdjointPath":
        """Evaluate ``p`` and ``q`` along freshly simulated paths (stores everything)."""
        model, grid, basis = self.model, self.grid, self.basis
        dW = np.asarray(dW, dtype=float)
        N, n = dW.shape[0], grid.n_steps
        ids = np.arange(N) if sample_ids is None else np.asarray(sample_ids)
        p = np.empty((N, n + 1, basis.n_points))
        p_tilde = np.empty((N, n, basis.n_points))
        q = np.empty((N, n, model.d, basis.n_points))
        X_all = np.empty((N, n + 1, basis.n_points))
        for k, X, u in state_steps(model, self.control, dW, grid, basis, ids):
            X_all[:, k] = X
            if u is None:
                p[:, k] = model.terminal(basis.points, X, 1)
                break
            pt, qk = self.coefficients(k, X)
            p_tilde[:, k], q[:, k] = pt, np.moveaxis(qk, 0, 1)
            p[:, k] = self._propagate(k, X, u, pt, qk)
        return AdjointPath(basis, grid, p, p_tilde, q, X_all)


@dataclass
class AdjointPath:
    """Adjoint values along simulated paths.

    ``p``: ``(N, n_steps + 1, P)``; ``p_tilde``: ``(N, n_steps, P)`` (the
    conditional expectation of the propagated adjoint); ``q``: ``(N, n_steps, d, P)``.
    """

    basis: SpectralBasis
    grid: TimeGrid
    p: np.ndarray
    p_tilde: np.ndarray
    q: np.ndarray
    X: np.ndarray = field(repr=False)

    def norms(self) -> dict:
        """Per-knot ``E||p||_2^2`` and ``sum_j E||q^j||_2^2``."""
        b = self.basis
        return {
            "p": b.lp_norm_pow(self.p, 2).mean(axis=0),
            "q": b.lp_norm_pow(self.q, 2).sum(axis=2).mean(axis=0),
        }


# -- curvature ---------------------------------------------------------------


@dataclass
class CurvatureFields:
    """``Hbar`` per knot ``(N, n_steps, P)`` and ``hbar`` ``(N, P)``."""

    Hbar: np.ndarray
    hbar: np.ndarray


def curvature(model: ProblemModel, X: np.ndarray, u: np.ndarray, p: np.ndarray, q: np.ndarray,
              grid: TimeGrid, basis: SpectralBasis) -> CurvatureFields:
    """``Hbar = l'' + p b'' + sum_j q^j sigma_j''`` on the grid and ``hbar = h''(X_T)``.

    ``X``: ``(N, n_steps + 1, P)``, ``u``: ``(N, n_steps)``, ``p``:
    ``(N, n_steps, P)``, ``q``: ``(N, n_steps, d, P)``.
    """
    x, n = basis.points, grid.n_steps
    H = np.empty((X.shape[0], n, basis.n_points))
    for k in range(n):
        t = k * grid.dt
        Xk, uk = X[:, k], u[:, k]
        H[:, k] = (
            model.running(t, x, Xk, uk, 2)
            + p[:, k] * model.drift(t, x, Xk, uk, 2)
            + np.sum(np.moveaxis(q[:, k], 1, 0) * model.diffusion(t, x, Xk, uk, 2), axis=0)
        )
    return CurvatureFields(H, np.array(model.terminal(x, X[:, n], 2)))


def _curvature_at(model, adjoint, k, t, x, X, u):
    H = np.array(model.running(t, x, X, u, 2), dtype=float)
    if adjoint is not None:
        p_tilde, q = adjoint.coefficients(k, X)
        H = H + p_tilde * model.drift(t, x, X, u, 2) + np.sum(q * model.diffusion(t, x, X, u, 2), axis=0)
    return H


# -- second-order form --------------------------------------------------------


class SecondAdjointForm(BaseEstimator):
    """Branching evaluator of ``<P_k f, g>``.

    For outer states ``X_k`` the evaluator draws ``n_branches`` fresh futures,
    runs the linearised flow from each test field (``Y_{k+1} = S f``, then
    ``Y_{j+1} = S(Y_j + b'_j Y_j dt + sum sigma'_j Y_j dW_j)``) and averages

        sum_{j > k} dt <Hbar_j Y^f_j, Y^g_j> + <hbar Y^f_n, Y^g_n>.

    ``Hbar`` along a branch uses the outer regression functions of ``adjoint``
    (``None`` means only ``l''`` enters).  All fields share the same branches,
    so the returned Gram matrices are exactly symmetric.
    """

    def __init__(self, model: ProblemModel = None, control: ControlPath = None, grid: TimeGrid = None,
                 basis: SpectralBasis = None, adjoint: FirstAdjoint = None, seeds: SeedPolicy = None,
                 n_branches: int = 256, tag: str = "branch"):
        self.model = model
        self.control = control
        self.grid = grid
        self.basis = basis
        self.adjoint = adjoint
        self.seeds = seeds
        self.n_branches = n_branches
        self.tag = tag

    def gram(self, k: int, X_k: np.ndarray, sample_ids: Sequence[int], fields: np.ndarray,
             dW_tail: np.ndarray | None = None, return_branches: bool = False):
        """Gram matrices of the form over test fields.

        Parameters
        ----------
        X_k : (S, P) outer states at knot ``k``.
        sample_ids : (S,) outer sample indices (select the branch streams).
        fields : (F, P) shared or (S, F, P) per-outer test fields (grid values).
        dW_tail : optional (S, M, n_steps - k, d) increments overriding the branch streams.

        Returns
        -------
        mean, se : (S, F, F) arrays; ``se`` is the standard error over branches.
            With ``return_branches`` the per-branch values ``(S, M, F, F)`` are
            returned instead.
        """
        M = int(self.n_branches)
        if M < 2:
            raise ValueError("the second-order form needs at least 2 inner branches")
        model, grid, basis = self.model, self.grid, self.basis
        n, dt, x = grid.n_steps, grid.dt, basis.points
        if not 0 <= k < n:
            raise ValueError(f"conditioning knot must lie in 0..{n - 1}")
        X_k = np.atleast_2d(np.asarray(X_k, dtype=float))
        S = X_k.shape[0]
        sample_ids = np.asarray(sample_ids)
        fields = np.asarray(fields, dtype=float)
        if fields.ndim == 2:
            fields = np.broadcast_to(fields, (S,) + fields.shape)
        F = fields.shape[1]
        if dW_tail is None:
            dW_tail = np.stack([
                branch_increments(self.seeds, grid, model.d, int(s), k, range(M), tag=self.tag)
                for s in sample_ids
            ])
        B = S * M
        dW = dW_tail.reshape(B, n - k, model.d)
        outer = np.repeat(sample_ids, M)
        X = np.repeat(X_k, M, axis=0)
        # Y[f] for every branch; first step is the pure semigroup
        Y = basis.semigroup(np.repeat(fields, M, axis=0).transpose(1, 0, 2), dt)  # (F, B, P)
        acc = np.zeros((B, F, F))
        iu = np.triu_indices(F)
        steps = state_steps(model, self.control, dW, grid, basis, outer, X, k)
        next(steps)  # knot k: the flow starts at k + 1
        for j, Xj, uj in steps:
            if uj is None:
                Hn = model.terminal(x, Xj, 2)
                weight = Hn
                scale = 1.0
            else:
                weight = _curvature_at(model, self.adjoint, j, j * dt, x, Xj, uj)
                scale = dt
            for a, b in zip(*iu):
                val = scale * basis.integrate(weight * (Y[a] * Y[b]))
                acc[:, a, b] += val
            if uj is None:
                break
            t = j * dt
            b1 = model.drift(t, x, Xj, uj, 1)
            s1 = model.diffusion(t, x, Xj, uj, 1)
            incr = Y + b1[None] * Y * dt + np.stack([noise_term(s1 * Yf[None], dW[:, j - k]) for Yf in Y])
            Y = basis.semigroup(incr, dt)
        acc[:, iu[1], iu[0]] = acc[:, iu[0], iu[1]]
        acc = acc.reshape(S, M, F, F)
        if return_branches:
            return acc
        return acc.mean(axis=1), acc.std(axis=1, ddof=1) / np.sqrt(M)

    def evaluate(self, k, X_k, sample_id, f, g) -> tuple[float, float]:
        """``(<P_k f, g>, standard error)`` for a single outer state."""
        fields = np.stack([np.asarray(f, float), np.asarray(g, float)])
        mean, se = self.gram(k, np.atleast_2d(X_k), [sample_id], fields)
        return float(mean[0, 0, 1]), float(se[0, 0, 1])


def second_adjoint_eval(k, f, g, X_k, sample_id, model, control, grid, basis, seeds,
                        n_branches=256, adjoint=None) -> float:
    form = SecondAdjointForm(model, control, grid, basis, adjoint, seeds, n_branches)
    return form.evaluate(k, X_k, sample_id, f, g)[0]


# -- duality -------------------------------------------------------------------


def duality_checks(model, control, s, adjoint: FirstAdjoint, n_samples, grid, basis, seeds, **kw) -> dict:
    """Both duality pairings for one spike, with Monte Carlo standard errors."""
    from .variation import variation_sweep

    row = variation_sweep(model, control, s.t0, s.v, [s.eps], n_samples, grid, basis, seeds,
                          adjoint=adjoint, **kw)[0]
    return {
        "gap1": row.duality1_gap, "gap1_se": row.duality1_gap_se,
        "lhs1": row.duality1_lhs, "rhs1": row.duality1_rhs,
        "gap2": row.duality2_gap, "gap2_se": row.duality2_gap_se,
        "lhs2": row.duality2_lhs, "rhs2": row.duality2_rhs,
    }


def forward_dual(model, control, k, f, dW, grid, basis, sample_ids=None) -> np.ndarray:
    """Per-path ``<h'(X_T), Y_T> + sum_{j >= k} dt <l'_j, Y_j>`` for the flow with ``Y_k = f``.

    Its mean equals ``E<p_k, f>`` for the exact adjoint, independently of any
    regression.
    """
    x, dt, n = basis.points, grid.dt, grid.n_steps
    N = dW.shape[0]
    ids = np.arange(N) if sample_ids is None else np.asarray(sample_ids)
    Y = None
    out = np.zeros(N)
    for j, X, u in state_steps(model, control, dW, grid, basis, ids):
        if j < k:
            continue
        if Y is None:
            Y = np.broadcast_to(np.asarray(f, float), X.shape).copy()
        if u is None:
            out += basis.integrate(model.terminal(x, X, 1) * Y)
            break
        t = j * dt
        out += dt * basis.integrate(model.running(t, x, X, u, 1) * Y)
        incr = Y + model.drift(t, x, X, u, 1) * Y * dt + noise_term(model.diffusion(t, x, X, u, 1) * Y[None], dW[:, j])
        Y = basis.semigroup(incr, dt)
    return out


# -- flow estimates -------------------------------------------------------------


def flow_moments(model, control, k, fields, n_samples, grid, basis, seeds, p=4.0, start=0) -> np.ndarray:
    """``(E||Y_j^{k,f}||_p^p)^{1/p}`` for ``j = k..n`` and each field; shape ``(F, n - k + 1)``.

    The flow starts from ``Y_k = f`` and follows the linearised dynamics
    along the reference state.
    """
    fields = np.atleast_2d(np.asarray(fields, float))
    dW = sample_increments(seeds, grid, model.d, n_samples, start=start)
    x, dt = basis.points, grid.dt
    ids = np.arange(start, start + n_samples)
    out = []
    Y = None
    for j, X, u in state_steps(model, control, dW, grid, basis, ids):
        if j < k:
            continue
        if Y is None:
            Y = np.broadcast_to(fields[:, None], (len(fields),) + X.shape).copy()
        out.append(basis.lp_norm_pow(Y, p).mean(axis=1) ** (1.0 / p))
        if u is None:
            break
        t = j * dt
        b1 = model.drift(t, x, X, u, 1)
        s1 = model.diffusion(t, x, X, u, 1)
        incr = Y + b1[None] * Y * dt + np.stack([noise_term(s1 * Yf[None], dW[:, j]) for Yf in Y])
        Y = basis.semigroup(incr, dt)
    return np.array(out).T


@dataclass
class FlowReport:
    lags: np.ndarray
    ratios: np.ndarray  # (F, L) moment ratio against ||f||_4
    growth_bound: np.ndarray  # (L,)
    weighted: dict  # eta -> (F, L) (s - t)^eta weighted ratios
    weighted_slopes: dict  # eta -> worst log-log slope at the smallest lags


def flow_estimates_check(model, control, k, fields, n_samples, grid, basis, seeds,
                         etas=(0.1, 0.2), n_small=6) -> FlowReport:
    """Moment ratios of the linearised flow and their fractional-power weighted versions.

    ``growth_bound`` is ``exp((sup b' + 1.5 sup |sigma'|^2)(s - t))``, the
    Gronwall bound on the fourth-moment ratio for pointwise multiplicative
    coefficients.  ``weighted_slopes`` fits ``log ratio`` against ``log(s - t)``
    over the ``n_small`` smallest positive lags; a bounded weighted ratio as
    ``s -> t`` means a slope that is not negative.
    """
    from .spectral import SpectralField, apply_fractional_power

    fields = np.atleast_2d(np.asarray(fields, float))
    norms = basis.lp_norm(fields, 4)
    base = flow_moments(model, control, k, fields, n_samples, grid, basis, seeds)
    lags = np.arange(base.shape[1]) * grid.dt
    ratios = base / norms[:, None]
    rng_x = np.linspace(-4, 4, 81)[:, None] * np.ones((1, basis.n_points))
    b1max, s1max = 0.0, 0.0
    for a in model.actions:
        uu = np.full(len(rng_x), a)
        for kk in (0, grid.n_steps // 2, grid.n_steps - 1):
            t = kk * grid.dt
            b1max = max(b1max, float(np.max(model.drift(t, basis.points, rng_x, uu, 1))))
            s1max = max(s1max, float(np.max(np.abs(model.diffusion(t, basis.points, rng_x, uu, 1)))))
    growth = np.exp((max(b1max, 0.0) + 1.5 * s1max ** 2) * lags)
    weighted, slopes = {}, {}
    for eta in etas:
        rough = np.stack([
            apply_fractional_power(SpectralField(basis, basis.to_modes(f)), eta, 1).grid_values for f in fields
        ])
        mom = flow_moments(model, control, k, rough, n_samples, grid, basis, seeds)
        w = lags[None] ** eta * mom / norms[:, None]
        weighted[eta] = w
        sel = slice(1, 1 + n_small)
        slopes[eta] = float(min(np.polyfit(np.log(lags[sel]), np.log(row[sel]), 1)[0] for row in w))
    return FlowReport(lags, ratios, growth, weighted, slopes)
