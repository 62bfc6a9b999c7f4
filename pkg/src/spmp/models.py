"""Coefficient models for the controlled heat equation and a named registry.

A model bundles the Nemytskii coefficients ``b, sigma_j, l, h`` together with
their first and second derivatives in the state variable ``r``.  Callbacks are
vectorised: they receive ``t`` (float), grid points ``x`` of shape ``(P,)``,
states ``r`` of shape ``(N, P)`` and actions ``u`` of shape ``(N, 1)``, and
return arrays broadcastable to ``r``.  Diffusion callbacks return a leading
axis of length ``d``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = ["ProblemModel", "make_model", "lq", "nonconvex_sigma", "MODELS", "build_model"]


R_CHECK = 4.0  # state range on which growth and derivative bounds are spot-checked


def _zero(*args):
    return 0.0


def _zero_terminal(x, r):
    return 0.0


@dataclass
class ProblemModel:
    """Coefficients, initial datum, horizon and finite action set of a control problem."""

    name: str
    T: float
    d: int
    actions: tuple
    x0: Callable
    b: Callable = _zero
    db: Callable = _zero
    d2b: Callable = _zero
    sigma: Callable = None
    dsigma: Callable = None
    d2sigma: Callable = None
    l: Callable = _zero
    dl: Callable = _zero
    d2l: Callable = _zero
    h: Callable = _zero_terminal
    dh: Callable = _zero_terminal
    d2h: Callable = _zero_terminal
    K: float = 1.0
    psi_bar: Callable = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"noise dimension d must be >= 1, got {self.d}")
        if not self.T > 0:
            raise ValueError("T must be positive")
        self.actions = tuple(float(a) for a in self.actions)
        if len(self.actions) == 0:
            raise ValueError("action set U must be nonempty")
        for name in ("sigma", "dsigma", "d2sigma"):
            if getattr(self, name) is None:
                setattr(self, name, _zero)
        if self.psi_bar is None:
            self.psi_bar = lambda x: np.zeros_like(x)

    # Broadcasting wrappers; ``u`` is an ``(N,)`` action vector.

    def drift(self, t, x, r, u, deriv=0):
        f = (self.b, self.db, self.d2b)[deriv]
        return np.broadcast_to(f(t, x, r, np.asarray(u, float)[:, None]), r.shape)

    def diffusion(self, t, x, r, u, deriv=0):
        f = (self.sigma, self.dsigma, self.d2sigma)[deriv]
        return np.broadcast_to(f(t, x, r, np.asarray(u, float)[:, None]), (self.d,) + r.shape)

    def running(self, t, x, r, u, deriv=0):
        f = (self.l, self.dl, self.d2l)[deriv]
        return np.broadcast_to(f(t, x, r, np.asarray(u, float)[:, None]), r.shape)

    def terminal(self, x, r, deriv=0):
        f = (self.h, self.dh, self.d2h)[deriv]
        return np.broadcast_to(f(x, r), r.shape)

    def check_hypotheses(self, x, rng, n=256, r_max=R_CHECK, t=None):
        """Spot-check derivative bounds and growth bounds at random points.

        Returns a dict of the worst observed ratios (<= 1 means satisfied).
        Growth bounds are only meaningful on the sampled range ``|r| <= r_max``.
        """
        t = 0.5 * self.T if t is None else t
        r = rng.uniform(-r_max, r_max, size=(n, len(x)))
        psi = np.abs(self.psi_bar(x))
        growth = self.K * (np.abs(r) + psi) + 1e-300
        worst = {}
        for u in self.actions:
            uu = np.full(n, u)
            for label, fun in (("b", self.drift), ("sigma", self.diffusion), ("l", self.running)):
                for deriv in (1, 2):
                    key = label + "'" * deriv
                    val = np.abs(fun(t, x, r, uu, deriv)).max() / self.K
                    worst[key] = max(worst.get(key, 0.0), val)
                val = (np.abs(fun(t, x, r, uu)) / growth).max()
                worst[label] = max(worst.get(label, 0.0), val)
        for deriv in (1, 2):
            worst["h" + "'" * deriv] = np.abs(self.terminal(x, r, deriv)).max() / self.K
        worst["h"] = (np.abs(self.terminal(x, r)) / growth).max()
        return {k: float(v) for k, v in worst.items()}


def make_model(name="custom", T=1.0, d=1, actions=(0.0,), x0=None, **callbacks) -> ProblemModel:
    """Model with zero coefficients except those passed as callbacks."""
    if x0 is None:
        x0 = lambda x: np.sin(np.pi * x)
    return ProblemModel(name=name, T=T, d=d, actions=actions, x0=x0, **callbacks)


def _e1(x):
    return np.sqrt(2.0) * np.sin(np.pi * x)


def lq(
    T=1.0,
    beta=-0.5,
    mu=0.5,
    delta=(0.3,),
    rho=(0.4,),
    a_l=1.0,
    c_u=0.2,
    a_h=1.0,
    x0_amp=1.0,
    actions=(-1.0, -0.5, 0.0, 0.5, 1.0),
) -> ProblemModel:
    """Linear-quadratic model with control-affine drift and diffusion.

    ``b = beta r + mu u e1(x)``, ``sigma_j = delta_j r + rho_j u e1(x)``,
    ``l = a_l r^2 / 2 + c_u u^2 / 2``, ``h = a_h r^2 / 2`` with
    ``e1 = sqrt(2) sin(pi x)``.  Coefficients are diagonal in the sine basis,
    so with ``x0`` along ``e1`` the first mode follows a scalar SDE exactly.
    """
    delta = np.atleast_1d(np.asarray(delta, float))
    rho = np.atleast_1d(np.asarray(rho, float))
    if delta.shape != rho.shape:
        raise ValueError("delta and rho must have one entry per noise dimension")
    d = len(delta)
    dl_, rl_ = delta[:, None, None], rho[:, None, None]

    def sigma(t, x, r, u):
        return dl_ * r + rl_ * u * _e1(x)

    def dsigma(t, x, r, u):
        return dl_ * np.ones_like(r)

    u_max = max(abs(a) for a in actions)
    # Quadratic costs only have bounded derivatives on a bounded range of r.
    K = max(abs(beta), float(np.abs(delta).max(initial=0)), R_CHECK * a_l, R_CHECK * a_h, 1.0)
    return ProblemModel(
        name="lq",
        T=T,
        d=d,
        actions=actions,
        x0=lambda x: x0_amp * np.sin(np.pi * x),
        b=lambda t, x, r, u: beta * r + mu * u * _e1(x),
        db=lambda t, x, r, u: beta,
        sigma=sigma,
        dsigma=dsigma,
        l=lambda t, x, r, u: 0.5 * a_l * r * r + 0.5 * c_u * u * u,
        dl=lambda t, x, r, u: a_l * r,
        d2l=lambda t, x, r, u: a_l,
        h=lambda x, r: 0.5 * a_h * r * r,
        dh=lambda x, r: a_h * r,
        d2h=lambda x, r: a_h,
        K=K,
        psi_bar=lambda x: (abs(mu) + float(np.abs(rho).max(initial=0)) + c_u) * u_max * np.sqrt(2.0) + 0 * x,
        params=dict(beta=beta, mu=mu, delta=delta.tolist(), rho=rho.tolist(), a_l=a_l,
                    c_u=c_u, a_h=a_h, x0_amp=x0_amp, actions=list(actions)),
    )


def nonconvex_sigma(
    T=1.0,
    kappa=0.5,
    gamma=0.2,
    rho=0.5,
    c=0.5,
    mu=0.0,
    forcing=0.0,
    a_l=1.0,
    a_h=1.0,
    x0_amp=1.0,
    actions=(-1.0, 1.0),
) -> ProblemModel:
    """Showcase with a control-dependent diffusion and a two-point action set.

    ``b = kappa r / (1 + r^2) + (forcing + mu u) s(x)``,
    ``sigma_1 = (gamma r + rho u + c) s(x)`` with ``s(x) = sin(pi x)``,
    ``l = a_l r^2 / 2`` and ``h = a_h r^2 / 2``.
    """

    def s(x):
        return np.sin(np.pi * x)

    def b(t, x, r, u):
        return kappa * r / (1.0 + r * r) + (forcing + mu * u) * s(x)

    def db(t, x, r, u):
        q = 1.0 + r * r
        return kappa * (1.0 - r * r) / (q * q)

    def d2b(t, x, r, u):
        q = 1.0 + r * r
        return 2.0 * kappa * r * (r * r - 3.0) / (q * q * q)

    def sigma(t, x, r, u):
        return ((gamma * r + rho * u + c) * s(x))[None]

    def dsigma(t, x, r, u):
        return (gamma * s(x) + 0.0 * r)[None]

    u_max = max(abs(a) for a in actions)
    K = max(abs(kappa) * 2.0, abs(gamma), R_CHECK * a_l, R_CHECK * a_h, 1.0)
    return ProblemModel(
        name="nonconvex-sigma",
        T=T,
        d=1,
        actions=actions,
        x0=lambda x: x0_amp * np.sin(np.pi * x),
        b=b,
        db=db,
        d2b=d2b,
        sigma=sigma,
        dsigma=dsigma,
        l=lambda t, x, r, u: 0.5 * a_l * r * r,
        dl=lambda t, x, r, u: a_l * r,
        d2l=lambda t, x, r, u: a_l,
        h=lambda x, r: 0.5 * a_h * r * r,
        dh=lambda x, r: a_h * r,
        d2h=lambda x, r: a_h,
        K=K,
        psi_bar=lambda x: (abs(rho) * u_max + abs(c) + abs(mu) * u_max + abs(forcing)) * s(x) + 0 * x,
        params=dict(kappa=kappa, gamma=gamma, rho=rho, c=c, mu=mu, forcing=forcing, a_l=a_l, a_h=a_h,
                    x0_amp=x0_amp, actions=list(actions)),
    )


MODELS = {
    "lq": lq,
    "nonconvex-sigma": nonconvex_sigma,
}


def build_model(name: str, **params) -> ProblemModel:
    try:
        builder = MODELS[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(MODELS)}") from None
    if "actions" in params:
        params["actions"] = tuple(params["actions"])
    for key in ("delta", "rho"):
        if name == "lq" and key in params:
            params[key] = tuple(np.atleast_1d(params[key]))
    return builder(**params)
