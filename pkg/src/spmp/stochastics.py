"""Wiener increments, path branching and the L^p stochastic-integral harness.

Every random stream is addressed by ``(purpose tag, indices...)`` and derived
from a single master seed through :class:`numpy.random.SeedSequence` spawn
keys feeding a Philox counter-based generator.  A stream never depends on the
order in which other streams were drawn, so ensembles can be split into chunks
or threads without changing a single bit of output.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, special

from .spectral import SpectralBasis

__all__ = [
    "TimeGrid",
    "SeedPolicy",
    "WienerPath",
    "sample_wiener",
    "sample_increments",
    "branch",
    "branch_increments",
    "bdg_constant",
    "BDGReport",
    "bdg_lp_check",
]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform knots ``t_k = k T / n_steps`` on ``[0, T]``."""

    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"horizon T must be positive, got {self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps!r}")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def knots(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def time(self, k: int) -> float:
        return k * self.dt

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        """Knot index of ``t``; raises if ``t`` is farther than ``tol*dt`` from a knot."""
        x = t / self.dt
        k = int(round(x))
        if abs(x - k) > tol or not 0 <= k <= self.n_steps:
            raise ValueError(f"time {t} is not a knot of {self}")
        return k

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.n_steps * factor)


def _tag_code(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:4], "little")


@dataclass(frozen=True)
class SeedPolicy:
    """Derives independent generators from ``(tag, *indices)``.

    The spawn key ``(hash32(tag), *indices)`` is injective on nonnegative
    integer indices of a fixed arity per tag.
    """

    master_seed: int = 20240101

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")

    def sequence(self, tag: str, *indices: int) -> np.random.SeedSequence:
        key = (_tag_code(tag),) + tuple(int(i) for i in indices)
        if any(i < 0 for i in key):
            raise ValueError(f"stream indices must be nonnegative, got {indices}")
        return np.random.SeedSequence(int(self.master_seed), spawn_key=key)

    def generator(self, tag: str, *indices: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(self.sequence(tag, *indices)))


@dataclass(frozen=True)
class WienerPath:
    """Increments of a ``d``-dimensional Wiener process on a :class:`TimeGrid`."""

    increments: np.ndarray  # (n_steps, d)
    grid: TimeGrid
    sample_index: int | None = None
    branch_index: int | None = field(default=None, compare=False)

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim != 2 or inc.shape[0] != self.grid.n_steps:
            raise ValueError(f"increments must have shape (n_steps, d), got {inc.shape}")
        object.__setattr__(self, "increments", inc)

    @property
    def d(self) -> int:
        return self.increments.shape[1]

    def values(self) -> np.ndarray:
        """``W_{t_0..t_n}`` with ``W_0 = 0``; shape ``(n_steps + 1, d)``."""
        out = np.zeros((self.grid.n_steps + 1, self.d))
        np.cumsum(self.increments, axis=0, out=out[1:])
        return out


def sample_wiener(seeds: SeedPolicy, grid: TimeGrid, d: int, sample_index: int) -> WienerPath:
    if d < 1:
        raise ValueError(f"noise dimension must be >= 1, got {d}")
    rng = seeds.generator("wiener", sample_index)
    inc = rng.standard_normal((grid.n_steps, d)) * np.sqrt(grid.dt)
    return WienerPath(inc, grid, sample_index)


def sample_increments(
    seeds: SeedPolicy, grid: TimeGrid, d: int, n_samples: int, start: int = 0
) -> np.ndarray:
    """Ensemble of increments, shape ``(n_samples, n_steps, d)``.

    Row ``i`` is bit-identical to ``sample_wiener(seeds, grid, d, start + i)``.
    """
    if d < 1:
        raise ValueError(f"noise dimension must be >= 1, got {d}")
    out = np.empty((n_samples, grid.n_steps, d))
    scale = np.sqrt(grid.dt)
    for i in range(n_samples):
        rng = seeds.generator("wiener", start + i)
        out[i] = rng.standard_normal((grid.n_steps, d))
    out *= scale
    return out


def branch_increments(
    seeds: SeedPolicy,
    grid: TimeGrid,
    d: int,
    sample_index: int,
    k: int,
    branch_indices: Sequence[int],
    tag: str = "branch",
) -> np.ndarray:
    """Fresh increments for steps ``k..n_steps-1``; shape ``(len(branch_indices), n_steps-k, d)``."""
    if not 0 <= k <= grid.n_steps:
        raise ValueError(f"knot {k} outside 0..{grid.n_steps}")
    n_tail = grid.n_steps - k
    out = np.empty((len(branch_indices), n_tail, d))
    for row, b in enumerate(branch_indices):
        rng = seeds.generator(tag, sample_index, k, b)
        out[row] = rng.standard_normal((n_tail, d))
    out *= np.sqrt(grid.dt)
    return out


def branch(path: WienerPath, k: int, seeds: SeedPolicy, branch_index: int) -> WienerPath:
    """Sample from the law of the path conditional on its first ``k`` increments.

    Increments before knot ``k`` are copied; later ones come from a stream keyed
    by ``(sample_index, k, branch_index)``.
    """
    n = path.grid.n_steps
    if not 0 <= k <= n:
        raise ValueError(f"knot {k} outside 0..{n}")
    tag, sample = ("branch", path.sample_index) if path.sample_index is not None else ("branch-anon", 0)
    inc = path.increments.copy()
    if k < n:
        tail = branch_increments(seeds, path.grid, path.d, sample, k, [branch_index], tag=tag)[0]
        inc[k:] = tail
    return WienerPath(inc, path.grid, path.sample_index, branch_index)


# -- L^p stochastic integral inequality ------------------------------------


@lru_cache(maxsize=None)
def _hermite_top_zero(p: float) -> float:
    """Largest positive zero of the parabolic cylinder function ``D_p``."""
    f = lambda x: special.pbdv(p, x)[0]
    xs = np.linspace(0.0, 2.0 * np.sqrt(p) + 6.0, 4001)
    vals = np.array([f(x) for x in xs])
    sign_change = np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0)[0]
    if len(sign_change) == 0:
        raise ValueError(f"no positive zero of D_{p} found")
    i = sign_change[-1]
    return optimize.brentq(f, xs[i], xs[i + 1], xtol=1e-14)


def bdg_constant(p: float, kind: str = "maximal") -> float:
    """Scalar Burkholder-Davis-Gundy constant ``c_p`` with ``E|M|^p <= c_p E<M>^{p/2}``.

    ``kind="fixed-time"`` is Davis' sharp constant ``z_p^p`` for ``E|M_t|^p``
    (``z_p`` the largest zero of the Hermite function), which equals 1 at
    ``p = 2``.  ``kind="maximal"`` bounds ``E sup_{s<=t}|M_s|^p`` and is
    Doob's factor ``(p/(p-1))^p`` times the former; it is sharp (= 4) at ``p = 2``.
    """
    if p < 2:
        raise ValueError(f"p must be >= 2, got {p}")
    sharp = _hermite_top_zero(float(p)) ** p
    if kind == "fixed-time":
        return sharp
    if kind == "maximal":
        return (p / (p - 1.0)) ** p * sharp
    raise ValueError(f"unknown constant kind {kind!r}")


@dataclass
class BDGReport:
    p: float
    t: float
    lhs: float
    rhs: float
    ratio: float
    ratio_upper99: float
    lhs_std_error: float
    c_p: float
    constant_kind: str
    ratio_fixed_time: float


def bdg_lp_check(
    p: float,
    d: int,
    integrand: Callable[[float, np.ndarray], np.ndarray],
    grid: TimeGrid,
    basis: SpectralBasis,
    n_samples: int,
    seeds: SeedPolicy,
    times: Sequence[float] | None = None,
    p_max: float = 8.0,
    constant: str = "maximal",
    n_boot: int = 1000,
) -> list[BDGReport]:
    """Monte Carlo check of ``E||I_t||_p^p <= c_p (int_0^t (E||H_s||_p^p)^{2/p} ds)^{p/2}``.

    ``integrand(t, W_t)`` receives the Wiener values ``(n_samples, d)`` at a
    knot and returns grid values broadcastable to ``(n_samples, d, n_points)``;
    feeding it only the current Wiener value keeps it progressive.  The Ito
    sum uses left-point evaluation.  ``ratio_upper99`` is the 99th percentile
    of a multinomial bootstrap of the ratio.
    """
    if not 2 <= p <= p_max:
        raise ValueError(f"p must lie in [2, {p_max}], got {p}")
    times = [grid.T] if times is None else list(times)
    k_ends = sorted({grid.index_of(t) for t in times})
    k_max = k_ends[-1]
    dW = sample_increments(seeds, grid, d, n_samples)
    W = np.zeros((n_samples, d))
    I = np.zeros((n_samples, basis.n_points))
    h_norms = np.empty((n_samples, k_max))
    snapshots = {}
    shape = (n_samples, d, basis.n_points)
    for k in range(k_max + 1):
        if k in k_ends:
            snapshots[k] = basis.lp_norm_pow(I, p)
        if k == k_max:
            break
        H = np.broadcast_to(integrand(grid.time(k), W), shape)
        h_norms[:, k] = basis.integrate(np.sum(H * H, axis=1) ** (p / 2.0))
        I += np.einsum("njx,nj->nx", H, dW[:, k])
        W = W + dW[:, k]

    c_p = bdg_constant(p, constant)
    c_sharp = bdg_constant(p, "fixed-time")
    rng = seeds.generator("bootstrap", int(p * 1000), d)
    counts = rng.multinomial(n_samples, np.full(n_samples, 1.0 / n_samples), size=n_boot)
    random_integrand = np.ptp(h_norms, axis=0).max(initial=0.0) > 0
    reports = []
    for k in k_ends:
        lhs_samples = snapshots[k]
        lhs = float(lhs_samples.mean())
        moments = h_norms[:, :k].mean(axis=0)
        base = float((grid.dt * np.sum(moments ** (2.0 / p))) ** (p / 2.0))
        rhs = c_p * base
        ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else np.inf)
        boot_lhs = counts @ lhs_samples / n_samples
        if random_integrand and k > 0:
            boot_m = counts @ h_norms[:, :k] / n_samples
            boot_rhs = c_p * (grid.dt * np.sum(boot_m ** (2.0 / p), axis=1)) ** (p / 2.0)
        else:
            boot_rhs = np.full(n_boot, rhs)
        with np.errstate(divide="ignore", invalid="ignore"):
            boot_ratio = np.where(boot_rhs > 0, boot_lhs / boot_rhs, 0.0)
        reports.append(
            BDGReport(
                p=float(p),
                t=grid.time(k),
                lhs=lhs,
                rhs=rhs,
                ratio=float(ratio),
                ratio_upper99=float(np.percentile(boot_ratio, 99)),
                lhs_std_error=float(lhs_samples.std(ddof=1) / np.sqrt(n_samples)),
                c_p=c_p,
                constant_kind=constant,
                ratio_fixed_time=float(lhs / (c_sharp * base)) if base > 0 else 0.0,
            )
        )
    return reports
