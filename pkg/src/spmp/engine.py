"""Exponential-Euler time stepping for the controlled state and for linear SPDEs.

One step maps ``X -> e^{dt A}(X + drift dt + sum_j noise_j dW^j)`` with every
coefficient evaluated on the collocation grid at the left knot.  Ensembles are
arrays of grid values with shape ``(N, P)``; the spectral basis keeps them
band-limited after every step.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .models import ProblemModel
from .spectral import SpectralBasis, SpectralField
from .stochastics import SeedPolicy, TimeGrid, WienerPath, sample_increments

__all__ = [
    "SimulationError",
    "ControlPath",
    "ConstantControl",
    "OpenLoopControl",
    "FeedbackControl",
    "StatePath",
    "LinearSPDESpec",
    "CostEstimate",
    "mild_step",
    "step_values",
    "noise_term",
    "state_steps",
    "solve_state",
    "linear_step",
    "solve_linear",
    "path_costs",
    "estimate_cost",
    "map_chunks",
]


class SimulationError(RuntimeError):
    """Raised when a simulated field stops being finite."""


def map_chunks(fn: Callable[[int, int], object], n: int, chunk: int = 256, threads: int = 1, concat: bool = True):
    """Evaluate ``fn(start, stop)`` over fixed chunks of ``range(n)``.

    Results are concatenated along axis 0 in chunk order (or returned as an
    ordered list with ``concat=False``).  Chunk boundaries do not depend on
    ``threads``, so the output is identical for any worker count.
    """
    bounds = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    if threads <= 1 or len(bounds) == 1:
        parts = [fn(a, b) for a, b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda ab: fn(*ab), bounds))
    return np.concatenate(parts, axis=0) if concat else parts


# -- controls ---------------------------------------------------------------


class ControlPath:
    """Progressive control rule.

    ``actions(k, X, sample_ids)`` returns the ``(N,)`` actions used on
    ``[t_k, t_{k+1})`` given the current states ``X`` (grid values, ``(N, P)``).
    It sees nothing beyond knot ``k``, so progressive measurability holds by
    construction.
    """

    def actions(self, k: int, X: np.ndarray, sample_ids: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class ConstantControl(ControlPath):
    value: float

    def actions(self, k, X, sample_ids):
        return np.full(len(X), float(self.value))


@dataclass(frozen=True)
class OpenLoopControl(ControlPath):
    """Tabulated actions, shared ``(n_steps,)`` or per sample ``(n_samples, n_steps)``."""

    table: np.ndarray

    def actions(self, k, X, sample_ids):
        table = np.asarray(self.table, dtype=float)
        if table.ndim == 1:
            return np.full(len(X), table[k])
        return table[np.asarray(sample_ids), k]

    @classmethod
    def two_piece(cls, grid: TimeGrid, first: float, second: float, switch_time: float):
        k = grid.index_of(switch_time)
        table = np.where(np.arange(grid.n_steps) < k, float(first), float(second))
        return cls(table)


@dataclass(frozen=True)
class FeedbackControl(ControlPath):
    """``rule(t, X) -> (N,)`` actions from the current state."""

    rule: Callable[[float, np.ndarray], np.ndarray]
    dt: float

    def actions(self, k, X, sample_ids):
        return np.asarray(self.rule(k * self.dt, X), dtype=float)


def _checked_actions(model: ProblemModel, control: ControlPath, k, X, ids) -> np.ndarray:
    u = np.asarray(control.actions(k, X, ids), dtype=float)
    if u.shape != (len(X),):
        raise ValueError(f"control returned shape {u.shape}, expected ({len(X)},)")
    if not np.isin(u, model.actions).all():
        bad = np.unique(u[~np.isin(u, model.actions)])
        raise ValueError(f"control left the action set {model.actions}: {bad[:5]}")
    return u


# -- single steps ------------------------------------------------------------


def noise_term(noise: np.ndarray, dW: np.ndarray) -> np.ndarray:
    """``sum_j noise[j] * dW[:, j]`` for noise ``(d, N, P)`` and increments ``(N, d)``."""
    if noise.shape[0] == 1:
        return noise[0] * dW[:, :1]
    return np.einsum("jnp,nj->np", noise, dW)


def step_values(basis: SpectralBasis, X, drift, noise, dW, dt) -> np.ndarray:
    """Batched exponential-Euler step on grid values."""
    incr = X + drift * dt
    if noise is not None:
        incr = incr + noise_term(noise, dW)
    return basis.semigroup(incr, dt)


def mild_step(X: SpectralField, drift: SpectralField, noise: Sequence[SpectralField], dW, dt: float) -> SpectralField:
    """``e^{dt A}(X + drift dt + sum_j noise_j dW^j)`` for single fields."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    dW = np.atleast_1d(np.asarray(dW, dtype=float))
    if len(noise) != len(dW):
        raise ValueError(f"{len(noise)} noise fields but {len(dW)} increments")
    modes = X.modes + drift.modes * dt
    for g, w in zip(noise, dW):
        X._check_same(g)
        modes = modes + g.modes * w
    return SpectralField(X.basis, modes * X.basis.decay(dt))


def _check_finite(X, k, ids):
    if not np.isfinite(X).all():
        rows = np.nonzero(~np.isfinite(X).all(axis=-1))[0]
        raise SimulationError(
            f"non-finite state at knot {k}, sample(s) {np.asarray(ids)[rows][:5].tolist()}"
        )


# -- state equation --------------------------------------------------------


def state_steps(
    model: ProblemModel,
    control: ControlPath,
    dW: np.ndarray,
    grid: TimeGrid,
    basis: SpectralBasis,
    sample_ids=None,
    X_start: np.ndarray | None = None,
    k_start: int = 0,
    k_stop: int | None = None,
) -> Iterator[tuple[int, np.ndarray, np.ndarray | None]]:
    """Yield ``(k, X_k, u_k)`` for ``k = k_start..k_stop``; ``u`` is None at the last knot.

    ``dW`` has shape ``(N, n_steps - k_start, d)`` or ``(N, n_steps, d)``
    (then only steps from ``k_start`` are used).
    """
    n = grid.n_steps
    k_stop = n if k_stop is None else k_stop
    N = dW.shape[0]
    if dW.shape[1] == n:
        offset = 0
    elif dW.shape[1] == n - k_start:
        offset = k_start
    else:
        raise ValueError(f"increments of length {dW.shape[1]} do not cover knots {k_start}..{n}")
    ids = np.arange(N) if sample_ids is None else np.asarray(sample_ids)
    x = basis.points
    if X_start is None:
        if k_start != 0:
            raise ValueError("X_start is required when k_start > 0")
        X = np.broadcast_to(basis.project(model.x0(x)), (N, basis.n_points)).copy()
    else:
        X = np.broadcast_to(np.asarray(X_start, float), (N, basis.n_points)).copy()
    dt = grid.dt
    for k in range(k_start, k_stop):
        t = k * dt
        u = _checked_actions(model, control, k, X, ids)
        yield k, X, u
        drift = model.drift(t, x, X, u)
        noise = model.diffusion(t, x, X, u)
        X = step_values(basis, X, drift, noise, dW[:, k - offset], dt)
        _check_finite(X, k + 1, ids)
    yield k_stop, X, None


@dataclass
class StatePath:
    """Simulated states on kept knots plus the realised controls."""

    basis: SpectralBasis
    grid: TimeGrid
    knots: np.ndarray  # kept knot indices
    values: np.ndarray  # (N, len(knots), P) grid values
    controls: np.ndarray  # (N, n_steps)
    sample_ids: np.ndarray = field(default=None)

    def field(self, k: int, sample: int = 0) -> SpectralField:
        pos = int(np.searchsorted(self.knots, k))
        if pos >= len(self.knots) or self.knots[pos] != k:
            raise KeyError(f"knot {k} was not kept")
        return SpectralField(self.basis, self.basis.to_modes(self.values[sample, pos]))

    @property
    def final(self) -> np.ndarray:
        return self.values[:, -1]


def _as_increments(w, grid: TimeGrid) -> np.ndarray:
    if isinstance(w, WienerPath):
        if w.grid != grid:
            raise ValueError("Wiener path lives on a different time grid")
        return w.increments[None]
    w = np.asarray(w, dtype=float)
    if w.ndim == 2:
        w = w[None]
    if w.ndim != 3 or w.shape[1] != grid.n_steps:
        raise ValueError(f"increments must have shape (N, n_steps, d), got {w.shape}")
    return w


def solve_state(
    model: ProblemModel,
    control: ControlPath,
    w,
    grid: TimeGrid,
    basis: SpectralBasis,
    keep: str | Sequence[int] = "all",
    sample_ids=None,
) -> StatePath:
    """Exponential-Euler solution of the controlled state equation.

    ``w`` is a :class:`WienerPath` or increments of shape ``(N, n_steps, d)``.
    ``keep`` selects stored knots: ``"all"``, ``"final"`` or explicit indices.
    """
    dW = _as_increments(w, grid)
    if dW.shape[2] != model.d:
        raise ValueError(f"model has d={model.d} but increments have {dW.shape[2]} components")
    if sample_ids is None and isinstance(w, WienerPath) and w.sample_index is not None:
        sample_ids = [w.sample_index]
    n = grid.n_steps
    if isinstance(keep, str):
        knots = np.arange(n + 1) if keep == "all" else np.array([n])
    else:
        knots = np.unique(np.asarray(keep, dtype=int))
    keep_set = {int(k): i for i, k in enumerate(knots)}
    N = dW.shape[0]
    values = np.empty((N, len(knots), basis.n_points))
    controls = np.empty((N, n))
    for k, X, u in state_steps(model, control, dW, grid, basis, sample_ids):
        if k in keep_set:
            values[:, keep_set[k]] = X
        if u is not None:
            controls[:, k] = u
    ids = np.arange(N) if sample_ids is None else np.asarray(sample_ids)
    return StatePath(basis, grid, knots, values, controls, ids)


# -- linear template ---------------------------------------------------------


def linear_step(basis: SpectralBasis, V, a, alpha, b, beta, dW, dt) -> np.ndarray:
    """One step of ``dV = (AV + aV + alpha)dt + sum_j (b_j V + beta_j) dW^j``.

    Any coefficient may be None (treated as zero).  ``b`` and ``beta`` carry a
    leading noise axis.
    """
    incr = V.copy()
    if a is not None:
        incr += a * V * dt
    if alpha is not None:
        incr += alpha * dt
    noise = None
    if b is not None:
        noise = b * V[None]
    if beta is not None:
        noise = beta if noise is None else noise + beta
    if noise is not None:
        incr += noise_term(np.broadcast_to(noise, (dW.shape[1],) + V.shape), dW)
    return basis.semigroup(incr, dt)


@dataclass
class LinearSPDESpec:
    """Coefficients of the linear equation as functions of the knot index.

    Each of ``a(k)``, ``alpha(k)`` returns ``(N, P)`` grid values (or None);
    ``b(k)``, ``beta(k)`` return ``(d, N, P)``.  The solution starts at knot
    ``k0`` from ``V0`` (zero if omitted).  ``bound`` is an optional declared
    bound on ``|a|`` and ``|b|`` that is enforced while stepping.
    """

    a: Callable[[int], np.ndarray | None] = lambda k: None
    alpha: Callable[[int], np.ndarray | None] = lambda k: None
    b: Callable[[int], np.ndarray | None] = lambda k: None
    beta: Callable[[int], np.ndarray | None] = lambda k: None
    V0: np.ndarray | None = None
    k0: int = 0
    bound: float | None = None


def solve_linear(spec: LinearSPDESpec, w, grid: TimeGrid, basis: SpectralBasis) -> np.ndarray:
    """Grid-value path ``(N, n_steps + 1, P)``; entries before ``spec.k0`` are zero."""
    dW = _as_increments(w, grid)
    N, n = dW.shape[0], grid.n_steps
    out = np.zeros((N, n + 1, basis.n_points))
    V = np.zeros((N, basis.n_points)) if spec.V0 is None else np.broadcast_to(spec.V0, (N, basis.n_points)).copy()
    out[:, spec.k0] = V
    for k in range(spec.k0, n):
        a, b = spec.a(k), spec.b(k)
        if spec.bound is not None:
            for name, c in (("a", a), ("b", b)):
                if c is not None and np.abs(c).max() > spec.bound:
                    raise ValueError(f"coefficient {name} exceeds declared bound {spec.bound} at knot {k}")
        V = linear_step(basis, V, a, spec.alpha(k), b, spec.beta(k), dW[:, k], grid.dt)
        _check_finite(V, k + 1, np.arange(N))
        out[:, k + 1] = V
    return out


# -- cost ------------------------------------------------------------------


def path_costs(
    model: ProblemModel,
    control: ControlPath,
    dW: np.ndarray,
    grid: TimeGrid,
    basis: SpectralBasis,
    sample_ids=None,
) -> np.ndarray:
    """Per-sample cost: left-point sum of ``int_D l`` plus ``int_D h(X_T)``."""
    x = basis.points
    total = np.zeros(dW.shape[0])
    for k, X, u in state_steps(model, control, dW, grid, basis, sample_ids):
        if u is None:
            total += basis.integrate(model.terminal(x, X))
        else:
            total += grid.dt * basis.integrate(model.running(k * grid.dt, x, X, u))
    return total


@dataclass
class CostEstimate:
    J: float
    std_error: float
    samples: np.ndarray = field(repr=False)


def estimate_cost(
    model: ProblemModel,
    control: ControlPath,
    n_samples: int,
    grid: TimeGrid,
    basis: SpectralBasis,
    seeds: SeedPolicy,
    start: int = 0,
    chunk: int = 256,
    threads: int = 1,
) -> CostEstimate:
    """Monte Carlo estimate of the cost with its standard error."""
    if n_samples < 2:
        raise ValueError("need at least 2 samples for a standard error")

    def run(a, b):
        dW = sample_increments(seeds, grid, model.d, b - a, start=start + a)
        return path_costs(model, control, dW, grid, basis, np.arange(start + a, start + b))

    samples = map_chunks(run, n_samples, chunk, threads)
    return CostEstimate(float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(n_samples)), samples)
