"""Experiment configuration: a flat YAML mapping, validated field by field."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .diffusion import ERROR_PROFILES, NoiseSchedule, SyntheticDenoiser, build_noise_schedule, make_denoiser
from .error_model import with_aligned_contributions, with_orthogonal_contributions
from .exceptions import ConfigError
from .scheduler import default_budget, make_two_model_denoiser
from .seeding import draw_samples, substream

EXPERIMENTS = ("validate-additivity", "calibrate", "pareto", "mix-models", "brute-force")
LAYOUTS = ("random", "aligned", "orthogonal")


@dataclass
class ExperimentConfig:
    experiment: str = "calibrate"
    # process
    T: int = 20
    d: int = 64
    alpha_kind: str = "cosine"
    alpha_min: float = 0.05
    alpha_max: float = 0.999
    # model
    spectral_radius: float = 0.9
    spectral_bound: float = 1.0
    per_step_jacobians: bool = False
    gamma: float = 0.12
    bias_scale: float = 0.1
    error_profile: str = "front-loaded"
    error_scale: float = 0.1
    error_correlation: float = 0.9
    contribution_layout: str = "random"
    seed: int = 0
    # calibration
    samples: int = 128
    budget: int | None = None
    lam: float | None = None
    speedup: float | None = None
    K: int | None = None
    enumeration_cap: int = 2**20
    # validation protocol; None means the entries of 2, 6, 10, ... below T
    validation_ks: list | None = None
    schedules_per_k: int = 20
    # pareto sweep; None means every K in 0..T
    pareto_ks: list | None = None
    # mix of models
    k_small: int = 4
    substitution_profile: str = "spiky"

    def __post_init__(self):
        self.validate()

    # -- validation -------------------------------------------------------------

    def validate(self) -> None:
        def fail(name, msg):
            raise ConfigError(f"config field {name!r}: {msg} (got {getattr(self, name)!r})")

        def need_int(name, lo=None, hi=None, optional=False):
            v = getattr(self, name)
            if v is None and optional:
                return
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                fail(name, "must be an integer")
            if lo is not None and v < lo:
                fail(name, f"must be >= {lo}")
            if hi is not None and v > hi:
                fail(name, f"must be <= {hi}")

        def need_float(name, lo=None, hi=None, optional=False, open_lo=False):
            v = getattr(self, name)
            if v is None and optional:
                return
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                fail(name, "must be a number")
            if lo is not None and (v < lo or (open_lo and v == lo)):
                fail(name, f"must be {'>' if open_lo else '>='} {lo}")
            if hi is not None and v > hi:
                fail(name, f"must be <= {hi}")

        def need_choice(name, choices):
            if getattr(self, name) not in choices:
                fail(name, f"must be one of {list(choices)}")

        need_choice("experiment", EXPERIMENTS)
        need_int("T", 3)
        need_int("d", 1)
        need_choice("alpha_kind", ("linear_alpha", "cosine"))
        need_float("alpha_min", 0.0, open_lo=True)
        need_float("alpha_max", 0.0, 1.0, open_lo=True)
        if not self.alpha_min < self.alpha_max:
            fail("alpha_min", "must be smaller than alpha_max")
        need_float("spectral_bound", 0.0, open_lo=True)
        need_float("spectral_radius", 0.0, self.spectral_bound, open_lo=True)
        if not isinstance(self.per_step_jacobians, bool):
            fail("per_step_jacobians", "must be true or false")
        need_float("gamma", 0.0)
        need_float("bias_scale", 0.0)
        need_choice("error_profile", ERROR_PROFILES)
        need_float("error_scale", 0.0)
        need_float("error_correlation", 0.0, 1.0)
        need_choice("contribution_layout", LAYOUTS)
        if self.contribution_layout == "orthogonal" and self.d < self.T:
            fail("contribution_layout", "orthogonal layout needs d >= T")
        need_int("seed", 0)
        need_int("samples", 1)
        need_int("budget", 3, self.T, optional=True)
        need_float("lam", 1.0, optional=True, open_lo=True)
        need_float("speedup", 1.0, optional=True, open_lo=True)
        need_int("K", 0, self.T, optional=True)
        need_int("enumeration_cap", 1)
        for name in ("validation_ks", "pareto_ks"):
            ks = getattr(self, name)
            if ks is None:
                continue
            if not isinstance(ks, list) or not ks:
                fail(name, "must be a non-empty list of integers")
            if any(isinstance(k, bool) or not isinstance(k, int) or not 0 <= k <= self.T for k in ks):
                fail(name, f"entries must be integers in [0, {self.T}]")
        need_int("schedules_per_k", 3)
        need_int("k_small", 0, self.T)
        need_choice("substitution_profile", ERROR_PROFILES)

    # -- (de)serialisation ------------------------------------------------------

    @classmethod
    def from_mapping(cls, data: dict[str, Any]) -> ExperimentConfig:
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a flat key-value mapping")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key, value in data.items():
            if isinstance(value, dict):
                raise ConfigError(f"config field {key!r}: nested mappings are not supported")
        return cls(**data)

    def to_mapping(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_mapping(), sort_keys=False))

    # -- construction -----------------------------------------------------------

    @property
    def effective_validation_ks(self) -> list[int]:
        if self.validation_ks is not None:
            return list(self.validation_ks)
        return list(range(2, self.T, 4))

    @property
    def effective_budget(self) -> int:
        return self.budget if self.budget is not None else default_budget(self.T)

    def noise_schedule(self) -> NoiseSchedule:
        return build_noise_schedule(self.alpha_kind, self.T, self.alpha_min, self.alpha_max)

    def _model_kwargs(self) -> dict:
        return dict(
            spectral_radius=self.spectral_radius,
            spectral_bound=self.spectral_bound,
            gamma=self.gamma,
            bias_scale=self.bias_scale,
            per_step_jacobians=self.per_step_jacobians,
        )

    def _apply_layout(self, model: SyntheticDenoiser, schedule: NoiseSchedule) -> SyntheticDenoiser:
        if self.contribution_layout == "random":
            return model
        norms = self.error_scale * model.metadata["magnitudes"]
        rng = substream(self.seed, "errors.layout")
        if self.contribution_layout == "aligned":
            return with_aligned_contributions(model, schedule, norms, rng.standard_normal(model.d))
        return with_orthogonal_contributions(model, schedule, norms, rng)

    def denoiser(self, schedule: NoiseSchedule | None = None) -> SyntheticDenoiser:
        schedule = schedule or self.noise_schedule()
        model = make_denoiser(
            self.T,
            self.d,
            error_profile_kind=self.error_profile,
            error_scale=self.error_scale,
            error_correlation=self.error_correlation,
            seed=self.seed,
            **self._model_kwargs(),
        )
        return self._apply_layout(model, schedule)

    def two_model_denoiser(self, schedule: NoiseSchedule | None = None) -> SyntheticDenoiser:
        schedule = schedule or self.noise_schedule()
        model = make_two_model_denoiser(
            self.T,
            self.d,
            seed=self.seed,
            substitution_profile=self.substitution_profile,
            substitution_scale=self.error_scale,
            substitution_correlation=self.error_correlation,
            **self._model_kwargs(),
        )
        return self._apply_layout(model, schedule)

    def calibration_samples(self) -> np.ndarray:
        return draw_samples(self.seed, self.samples, self.d)


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat key-value mapping")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig.from_mapping(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
