"""Dirichlet Laplacian calculus on the unit interval.

Fields live in two coherent representations: coefficients in the orthonormal
sine basis ``e_k(x) = sqrt(2) sin(k pi x)`` and values on a uniform midpoint
grid.  The grid/mode maps are the type-II/III discrete sine transforms, so the
Laplacian is diagonal and every semigroup or fractional power is a per-mode
scaling.

Batched helpers on :class:`SpectralBasis` work on arrays whose last axis is the
grid (or mode) axis; :class:`SpectralField` wraps a single field for the
public, value-level API.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy import fft

__all__ = [
    "SpatialGrid",
    "DirichletLaplacian",
    "SpectralBasis",
    "SpectralField",
    "apply_semigroup",
    "apply_fractional_power",
    "lp_norm",
    "multiply_pointwise",
]


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform midpoint collocation grid on (0, 1) with equal quadrature weights."""

    n_points: int

    def __post_init__(self):
        if int(self.n_points) != self.n_points or self.n_points < 2:
            raise ValueError(f"n_points must be an integer >= 2, got {self.n_points!r}")

    @cached_property
    def points(self) -> np.ndarray:
        return (np.arange(self.n_points) + 0.5) / self.n_points

    @cached_property
    def weights(self) -> np.ndarray:
        return np.full(self.n_points, 1.0 / self.n_points)


@dataclass(frozen=True)
class DirichletLaplacian:
    """Spectrum of ``A = diffusivity * d^2/dx^2`` with zero boundary values.

    ``diffusivity=0`` gives the zero generator, which is only useful for
    testing time-stepping arithmetic in isolation.
    """

    n_modes: int
    diffusivity: float = 1.0

    def __post_init__(self):
        if int(self.n_modes) != self.n_modes or self.n_modes < 1:
            raise ValueError(f"n_modes must be a positive integer, got {self.n_modes!r}")
        if self.diffusivity < 0:
            raise ValueError("diffusivity must be nonnegative")

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        return np.arange(1, self.n_modes + 1, dtype=float)

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        """Eigenvalues of ``-A``: ``diffusivity * (k pi)^2``."""
        return self.diffusivity * (self.wavenumbers * np.pi) ** 2


class SpectralBasis:
    """Sine basis truncated to ``n_modes`` modes, sampled on ``n_points`` points.

    Parameters
    ----------
    n_modes : int
        Number of retained sine modes.
    n_points : int, optional
        Collocation points; defaults to ``2 * n_modes`` to limit aliasing of
        pointwise products.  Must exceed ``n_modes``.
    diffusivity : float
        Scales the Laplacian spectrum (1.0 for the standard heat operator).
    """

    def __init__(self, n_modes: int = 64, n_points: int | None = None, diffusivity: float = 1.0):
        self.laplacian = DirichletLaplacian(n_modes, diffusivity)
        n_points = 2 * n_modes if n_points is None else n_points
        self.grid = SpatialGrid(n_points)
        if n_points <= n_modes:
            raise ValueError(
                f"n_points ({n_points}) must exceed n_modes ({n_modes}) for an exact round trip"
            )
        self._to_modes_scale = np.sqrt(2.0) / (2.0 * n_points)
        self._to_grid_scale = 1.0 / np.sqrt(2.0)

    def __repr__(self):
        return (
            f"SpectralBasis(n_modes={self.n_modes}, n_points={self.n_points}, "
            f"diffusivity={self.laplacian.diffusivity})"
        )

    def __eq__(self, other):
        return (
            isinstance(other, SpectralBasis)
            and self.n_modes == other.n_modes
            and self.n_points == other.n_points
            and self.laplacian.diffusivity == other.laplacian.diffusivity
        )

    def __hash__(self):
        return hash((self.n_modes, self.n_points, self.laplacian.diffusivity))

    @property
    def n_modes(self) -> int:
        return self.laplacian.n_modes

    @property
    def n_points(self) -> int:
        return self.grid.n_points

    @property
    def points(self) -> np.ndarray:
        return self.grid.points

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.laplacian.eigenvalues

    @cached_property
    def eigenfunctions(self) -> np.ndarray:
        """``(n_modes, n_points)`` table of ``e_k`` on the grid."""
        k = self.laplacian.wavenumbers[:, None]
        return np.sqrt(2.0) * np.sin(k * np.pi * self.points[None, :])

    # -- transforms -------------------------------------------------------

    def to_modes(self, values: np.ndarray) -> np.ndarray:
        """Project grid values onto the retained modes (last axis)."""
        values = np.asarray(values, dtype=float)
        coeffs = fft.dst(values, type=2, axis=-1)
        return coeffs[..., : self.n_modes] * self._to_modes_scale

    def to_grid(self, modes: np.ndarray) -> np.ndarray:
        """Evaluate a mode expansion on the grid (last axis)."""
        modes = np.asarray(modes, dtype=float)
        padded = np.zeros(modes.shape[:-1] + (self.n_points,))
        padded[..., : self.n_modes] = modes * self._to_grid_scale
        return fft.dst(padded, type=3, axis=-1)

    def project(self, values: np.ndarray) -> np.ndarray:
        """Band-limit grid values to the retained modes."""
        return self.to_grid(self.to_modes(values))

    # -- operators on grid values ------------------------------------------

    def decay(self, t: float) -> np.ndarray:
        if t < 0:
            raise ValueError(f"semigroup time must be nonnegative, got {t}")
        return np.exp(-self.eigenvalues * t)

    def semigroup(self, values: np.ndarray, t: float) -> np.ndarray:
        """``e^{tA}`` applied to grid values; the result is band-limited."""
        return self.to_grid(self.to_modes(values) * self.decay(t))

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Midpoint quadrature over (0, 1) along the last axis."""
        return np.asarray(values).sum(axis=-1) / self.n_points

    def inner(self, f: np.ndarray, g: np.ndarray) -> np.ndarray:
        return self.integrate(np.asarray(f) * np.asarray(g))

    def lp_norm(self, values: np.ndarray, p: float) -> np.ndarray:
        if not p >= 1 or not np.isfinite(p):
            raise ValueError(f"p must lie in [1, inf), got {p}")
        return self.integrate(np.abs(values) ** p) ** (1.0 / p)

    def lp_norm_pow(self, values: np.ndarray, p: float) -> np.ndarray:
        """``||f||_p^p`` without the final root (what Monte Carlo averages)."""
        if not p >= 1 or not np.isfinite(p):
            raise ValueError(f"p must lie in [1, inf), got {p}")
        if p == 2:
            return self.integrate(values * values)
        return self.integrate(np.abs(values) ** p)

    # -- constructors --------------------------------------------------------

    def field(self, values: np.ndarray | Callable | float) -> "SpectralField":
        """Build a field from grid values, a callable of ``x``, or a constant."""
        if callable(values):
            values = values(self.points)
        values = np.broadcast_to(np.asarray(values, dtype=float), (self.n_points,))
        return SpectralField(self, self.to_modes(values))

    def from_modes(self, modes) -> "SpectralField":
        modes = np.asarray(modes, dtype=float)
        if modes.shape != (self.n_modes,):
            raise ValueError(f"expected {self.n_modes} modes, got shape {modes.shape}")
        return SpectralField(self, modes)

    def zeros(self) -> "SpectralField":
        return SpectralField(self, np.zeros(self.n_modes))

    def constant_one_values(self) -> np.ndarray:
        """Grid values of the (unprojected) constant function 1."""
        return np.ones(self.n_points)


@dataclass(frozen=True, eq=False)
class SpectralField:
    """A band-limited function on (0, 1).

    ``modes`` is authoritative; ``grid_values`` is derived from it and cached.
    """

    basis: SpectralBasis
    modes: np.ndarray = field(repr=False)

    def __post_init__(self):
        modes = np.array(self.modes, dtype=float)
        modes.setflags(write=False)
        object.__setattr__(self, "modes", modes)

    @cached_property
    def grid_values(self) -> np.ndarray:
        values = self.basis.to_grid(self.modes)
        values.setflags(write=False)
        return values

    def _check_same(self, other: "SpectralField"):
        if self.basis != other.basis:
            raise ValueError(f"grid mismatch: {self.basis!r} vs {other.basis!r}")

    def __add__(self, other):
        if isinstance(other, SpectralField):
            self._check_same(other)
            return SpectralField(self.basis, self.modes + other.modes)
        return NotImplemented

    def __sub__(self, other):
        if isinstance(other, SpectralField):
            self._check_same(other)
            return SpectralField(self.basis, self.modes - other.modes)
        return NotImplemented

    def __mul__(self, scalar):
        if np.isscalar(scalar):
            return SpectralField(self.basis, self.modes * float(scalar))
        return NotImplemented

    __rmul__ = __mul__

    def __neg__(self):
        return SpectralField(self.basis, -self.modes)

    def inner(self, other: "SpectralField") -> float:
        self._check_same(other)
        return float(self.basis.inner(self.grid_values, other.grid_values))

    def allclose(self, other: "SpectralField", rtol=1e-12, atol=1e-12) -> bool:
        self._check_same(other)
        return bool(np.allclose(self.modes, other.modes, rtol=rtol, atol=atol))


def apply_semigroup(f: SpectralField, t: float) -> SpectralField:
    """Heat flow ``e^{tA} f``: mode ``k`` decays by ``exp(-lambda_k t)``."""
    return SpectralField(f.basis, f.modes * f.basis.decay(t))


def apply_fractional_power(f: SpectralField, eta: float, sign: int = 1) -> SpectralField:
    """``(-A)^{sign * eta} f`` for ``eta`` in [0, 1]."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    if sign not in (1, -1):
        raise ValueError(f"sign must be +1 or -1, got {sign}")
    if not np.all(np.isfinite(f.modes)):
        raise ValueError("field has non-finite modes")
    lam = f.basis.eigenvalues
    if eta == 0.0:
        return SpectralField(f.basis, f.modes.copy())
    if sign < 0 and np.any(lam == 0):
        raise ValueError("negative fractional power of a singular generator")
    return SpectralField(f.basis, f.modes * lam ** (sign * eta))


def lp_norm(f: SpectralField, p: float) -> float:
    """Quadrature approximation of ``(int_0^1 |f|^p dx)^{1/p}``."""
    return float(f.basis.lp_norm(f.grid_values, p))


def multiply_pointwise(f: SpectralField, g: SpectralField) -> SpectralField:
    """Pointwise product on the grid, projected back onto the retained modes."""
    f._check_same(g)
    return SpectralField(f.basis, f.basis.to_modes(f.grid_values * g.grid_values))
