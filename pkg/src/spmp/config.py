"""Experiment configuration: defaults, validation, YAML round trip."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .models import MODELS, build_model
from .spectral import SpectralBasis
from .stochastics import SeedPolicy, TimeGrid

__all__ = ["ConfigError", "ExperimentConfig", "TOLERANCES", "load_config"]


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


# Gate thresholds of the acceptance checks; any of them can be overridden.
TOLERANCES = {
    "y4_slope_range": [0.4, 0.6],
    "z2_slope_range": [0.85, 1.15],
    "residual_slope_min": 1.15,
    "expansion_slope_min": 1.0,
    "n_se": 3.0,
    "duality_halving": 2.0,
    "adjoint_rel": 1e-2,
    "adjoint_rel_fine": 5e-3,
    "second_adjoint_rel": 1e-2,
    "round_off": 1e-12,
    "final_duality_slope_min": 1.0,
    "mp_threshold": 3.0,
    "mp_budget": 0.01,
    "mp_worst_min": 0.2,
    "bdg_ratio_max": 1.0,
    "oracle_rel": 1e-10,
}


def _default_eps():
    return [2.0 ** -j for j in range(4, 10)]


@dataclass
class ExperimentConfig:
    scenario: str = "nonconvex-sigma"
    model_params: dict = field(default_factory=lambda: {"forcing": 10.0})
    n_modes: int = 64
    n_points: int | None = None
    n_steps: int = 512
    rate_steps: int = 2048
    T: float = 1.0
    n_outer: int = 2000
    n_inner: int = 256
    eps_values: list = field(default_factory=_default_eps)
    spike_t0: float = 0.5
    spike_v: float = 1.0
    base_control: float = -1.0
    final_duality_samples: int = 1000
    mp_knots: int = 8
    mp_outer: int = 16
    bdg_samples: int = 2000
    oracle_samples: int = 200
    master_seed: int = 20240101
    out_dir: str = "spmp-out"
    threads: int = 1
    chunk: int = 250
    tolerances: dict = field(default_factory=dict)

    _SIZES = ("n_modes", "n_steps", "rate_steps", "n_outer", "n_inner", "final_duality_samples",
              "mp_knots", "mp_outer", "bdg_samples", "oracle_samples", "threads", "chunk")

    def __post_init__(self):
        self.validate()

    def validate(self) -> "ExperimentConfig":
        for key in self._SIZES:
            value = getattr(self, key)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ConfigError(key, f"must be a positive integer, got {value!r}")
        if self.n_points is None:
            self.n_points = 2 * self.n_modes
        if self.n_points != 2 * self.n_modes:
            raise ConfigError("n_points", f"must equal 2 * n_modes = {2 * self.n_modes}")
        if not self.T > 0:
            raise ConfigError("T", "must be positive")
        if self.scenario not in MODELS:
            raise ConfigError("scenario", f"unknown scenario {self.scenario!r}; choose from {sorted(MODELS)}")
        if not isinstance(self.model_params, dict):
            raise ConfigError("model_params", "must be a mapping")
        try:
            model = self.model()
        except TypeError as exc:
            raise ConfigError("model_params", str(exc)) from None
        if len(self.eps_values) < 4:
            raise ConfigError("eps_values", "need at least 4 values for a slope fit")
        if any(not e > 0 for e in self.eps_values):
            raise ConfigError("eps_values", "must be positive")
        dt = self.T / self.rate_steps
        if min(self.eps_values) < 4 * dt - 1e-15:
            raise ConfigError("eps_values", f"smallest epsilon must be >= 4 * dt = {4 * dt:g} (rate_steps)")
        if not (0 <= self.spike_t0 and self.spike_t0 + max(self.eps_values) < self.T):
            raise ConfigError("spike_t0", "need 0 <= t0 and t0 + max(eps) < T")
        for key, value in (("spike_v", self.spike_v), ("base_control", self.base_control)):
            if float(value) not in model.actions:
                raise ConfigError(key, f"{value!r} is not in the action set {model.actions}")
        unknown = set(self.tolerances) - set(TOLERANCES)
        if unknown:
            raise ConfigError("tolerances", f"unknown keys {sorted(unknown)}")
        if not isinstance(self.master_seed, int) or self.master_seed < 0:
            raise ConfigError("master_seed", "must be a nonnegative integer")
        return self

    # -- derived objects -----------------------------------------------------

    def tol(self, key: str):
        return self.tolerances.get(key, TOLERANCES[key])

    def model(self):
        return build_model(self.scenario, T=self.T, **dict(self.model_params))

    def basis(self) -> SpectralBasis:
        return SpectralBasis(self.n_modes)

    def grid(self, n_steps: int | None = None) -> TimeGrid:
        return TimeGrid(self.T, n_steps or self.n_steps)

    def seeds(self) -> SeedPolicy:
        return SeedPolicy(self.master_seed)

    # -- serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a mapping")
        names = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in names:
                raise ConfigError(key, "unknown configuration key")
        return cls(**data)

    def replace(self, **changes) -> "ExperimentConfig":
        return self.from_dict({**self.to_dict(), **changes})


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read a YAML config; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig()
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError("<file>", f"not valid YAML: {exc}") from None
    return ExperimentConfig.from_dict(data)
