"""Numerical laboratory for the stochastic maximum principle of a controlled stochastic heat equation.

Modules
-------
spectral      sine basis, Dirichlet Laplacian, heat semigroup, L^p norms
stochastics   time grids, counter-based seeding, Wiener increments, moment inequality check
engine        exponential-Euler state solver, controls, linear template, cost estimates
variation     spike perturbations, first/second variations, rate sweeps
adjoint       least-squares Monte Carlo first adjoint, branching second-order form
smp           Hamiltonian, maximum-principle test, quadratic duality, rate fits
cli           configuration-driven experiments and the acceptance driver
"""

__version__ = "0.1.0"
