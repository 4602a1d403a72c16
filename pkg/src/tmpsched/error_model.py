"""Closed-form and measured deviation of the final latent under a precision schedule.

With the deviation recursion ``delta_{t-1} = A_t delta_t + B_t eps_t`` and
``A_t = a_t I + B_t J_t``, the contribution of quantizing step ``t`` is
``P_t B_t eps_t`` with propagator ``P_t = A_1 A_2 ... A_{t-1}``. The closed
forms below are exact for a linear denoiser (``gamma = 0``); for ``gamma > 0``
they are the first-order prediction and deviations have to be measured by
running trajectories.
"""

from __future__ import annotations

import csv
import enum
import functools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffusion import (
    NoiseSchedule,
    PrecisionSchedule,
    SyntheticDenoiser,
    _check_lengths,
    final_states,
    step_coefficients,
)
from .exceptions import ParameterError, ShapeError

SCHEMA_VERSION = 1


@functools.lru_cache(maxsize=64)
def _propagators(model: SyntheticDenoiser, schedule: NoiseSchedule) -> np.ndarray:
    _check_lengths(model, schedule)
    T, d = model.T, model.d
    props = np.empty((T, d, d))
    acc = np.eye(d)
    for t in range(1, T + 1):
        props[t - 1] = acc
        c = step_coefficients(schedule, t)
        acc = acc @ (c.a_scalar * np.eye(d) + c.b * model.jacobian(t))
    props.setflags(write=False)
    return props


def propagators(model: SyntheticDenoiser, schedule: NoiseSchedule) -> np.ndarray:
    """Prefix products ``P_t = A_1 ... A_{t-1}`` stacked as ``(T, d, d)``; ``P_1 = I``."""
    return _propagators(model, schedule)


def step_b_values(schedule: NoiseSchedule) -> np.ndarray:
    return np.array([step_coefficients(schedule, t).b for t in range(1, schedule.T + 1)])


@functools.lru_cache(maxsize=64)
def _contributions(model: SyntheticDenoiser, schedule: NoiseSchedule) -> np.ndarray:
    props = _propagators(model, schedule)
    scaled = step_b_values(schedule)[:, None] * model.quant_errors
    out = np.einsum("tij,tj->ti", props, scaled)
    out.setflags(write=False)
    return out


def contributions(model: SyntheticDenoiser, schedule: NoiseSchedule) -> np.ndarray:
    """Per-step contribution vectors ``P_t B_t eps_t``, row ``t - 1``."""
    return _contributions(model, schedule)


def per_step_contribution(model: SyntheticDenoiser, schedule: NoiseSchedule, t: int) -> np.ndarray:
    if not 1 <= t <= schedule.T:
        raise IndexError(f"timestep {t} outside [1, {schedule.T}]")
    return contributions(model, schedule)[t - 1].copy()


def closed_form_delta0(model: SyntheticDenoiser, schedule: NoiseSchedule) -> np.ndarray:
    """Final deviation of the fully quantized pipeline, starting from ``delta_T = 0``."""
    c = contributions(model, schedule)
    return c[np.ones(c.shape[0], dtype=bool)].sum(axis=0)


def ansatz_delta0(model: SyntheticDenoiser, schedule: NoiseSchedule, Z: PrecisionSchedule) -> np.ndarray:
    """Schedule-gated sum of per-step contributions."""
    _check_lengths(model, schedule, Z)
    # same reduction as closed_form_delta0 so Z = 0 reproduces it bit for bit
    return contributions(model, schedule)[Z.bits == 0].sum(axis=0)


# -- construction of error vectors with prescribed contributions ------------------


def errors_for_contributions(
    model: SyntheticDenoiser, schedule: NoiseSchedule, targets: np.ndarray
) -> np.ndarray:
    """Solve ``P_t B_t eps_t = targets[t-1]`` for every ``eps_t``."""
    targets = np.asarray(targets, dtype=float)
    if targets.shape != (model.T, model.d):
        raise ShapeError(f"targets must have shape ({model.T}, {model.d})")
    props = propagators(model, schedule)
    b = step_b_values(schedule)
    if np.any(b == 0.0):
        raise ParameterError("a step with B_t = 0 cannot carry a contribution")
    return np.stack([np.linalg.solve(props[i], targets[i]) / b[i] for i in range(model.T)])


def with_aligned_contributions(
    model: SyntheticDenoiser,
    schedule: NoiseSchedule,
    norms: Sequence[float],
    direction: np.ndarray | None = None,
) -> SyntheticDenoiser:
    """Replace the errors so every contribution points along one shared direction.

    Norms then add exactly: ``E(Z) = sum of norms over quantized steps``.
    """
    norms = np.asarray(norms, dtype=float)
    if np.any(norms < 0):
        raise ParameterError("contribution norms must be non-negative")
    if direction is None:
        direction = np.ones(model.d)
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    return model.with_errors(errors_for_contributions(model, schedule, norms[:, None] * direction))


def with_orthogonal_contributions(
    model: SyntheticDenoiser,
    schedule: NoiseSchedule,
    norms: Sequence[float],
    rng: np.random.Generator,
) -> SyntheticDenoiser:
    """Replace the errors so the per-step contributions are mutually orthogonal.

    Squared norms then add exactly: ``E(Z)^2 = sum of squared norms``. Needs ``d >= T``.
    """
    if model.d < model.T:
        raise ParameterError(f"orthogonal contributions need d >= T (d={model.d}, T={model.T})")
    norms = np.asarray(norms, dtype=float)
    basis, _ = np.linalg.qr(rng.standard_normal((model.d, model.T)))
    targets = basis.T * norms[:, None]
    return model.with_errors(errors_for_contributions(model, schedule, targets))


# -- measurement ------------------------------------------------------------------


@dataclass
class DeviationReport:
    """Final-latent deviation of one schedule over a calibration set."""

    schedule: PrecisionSchedule
    per_sample_errors: np.ndarray
    delta0: np.ndarray | None = None  # (m, d); not serialized

    @property
    def e_scalar(self) -> float:
        return float(np.mean(self.per_sample_errors))

    mean_error = e_scalar

    @property
    def variance(self) -> float:
        return float(np.var(self.per_sample_errors))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "schedule_bits": self.schedule.to_string(),
            "mean_error": self.e_scalar,
            "per_sample_errors": [float(v) for v in self.per_sample_errors],
            "variance": self.variance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> DeviationReport:
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ParameterError(f"unsupported report schema {data.get('schema_version')!r}")
        return cls(
            schedule=PrecisionSchedule.from_string(data["schedule_bits"]),
            per_sample_errors=np.array(data["per_sample_errors"], dtype=float),
        )

    @classmethod
    def from_json(cls, text: str) -> DeviationReport:
        return cls.from_dict(json.loads(text))


class DeviationMeter:
    """Measures ``E(Z)`` against the cached full-precision reference.

    ``E`` is the mean over calibration samples of the per-sample L2 norm of
    ``x_0^(Z) - x_0^(1)``. ``evaluations`` counts trajectory batches run for
    non-reference schedules.
    """

    def __init__(self, model: SyntheticDenoiser, schedule: NoiseSchedule, samples: np.ndarray):
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        if samples.shape[0] < 1 or samples.size == 0:
            raise ParameterError("at least one calibration sample is required")
        if samples.shape[1] != model.d:
            raise ShapeError(f"samples have dimension {samples.shape[1]}, model expects {model.d}")
        _check_lengths(model, schedule)
        self.model = model
        self.schedule = schedule
        self.samples = samples
        self.reference = final_states(samples, PrecisionSchedule.ones(schedule.T), model, schedule)
        self.evaluations = 0
        self._cache: dict[PrecisionSchedule, DeviationReport] = {}

    @property
    def T(self) -> int:
        return self.schedule.T

    def report(self, Z: PrecisionSchedule) -> DeviationReport:
        if Z.T != self.T:
            raise ShapeError(f"schedule has {Z.T} entries, expected {self.T}")
        hit = self._cache.get(Z)
        if hit is not None:
            return hit
        if Z.k() == self.T:
            deltas = np.zeros_like(self.reference)
        else:
            deltas = final_states(self.samples, Z, self.model, self.schedule) - self.reference
            self.evaluations += 1
        rep = DeviationReport(Z, np.linalg.norm(deltas, axis=1), deltas)
        self._cache[Z] = rep
        return rep

    def E(self, Z: PrecisionSchedule) -> float:
        return self.report(Z).e_scalar

    def upcast_gain(self, t: int) -> float:
        """``E(0) - E(e_t)``: error removed by running only step ``t`` at full precision."""
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside [1, {self.T}]")
        return self.E(PrecisionSchedule.zeros(self.T)) - self.E(PrecisionSchedule.one_hot(self.T, t))

    def downcast_loss(self, t: int) -> float:
        """``E(1 - e_t) - E(1)``: error added by quantizing only step ``t``."""
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside [1, {self.T}]")
        ones = PrecisionSchedule.ones(self.T)
        return self.E(PrecisionSchedule.one_hot(self.T, t).complement()) - self.E(ones)

    def gain_profile(self, kind: str = "upcast") -> GainProfile:
        """Fully measured profile over all ``T`` timesteps."""
        kind = GainKind(kind)
        fn = self.upcast_gain if kind is GainKind.UPCAST else self.downcast_loss
        values = [fn(t) for t in range(1, self.T + 1)]
        return GainProfile(kind, np.array(values), [Provenance.MEASURED] * self.T)


def measure_E(
    Z: PrecisionSchedule, model: SyntheticDenoiser, schedule: NoiseSchedule, samples: np.ndarray
) -> DeviationReport:
    return DeviationMeter(model, schedule, samples).report(Z)


def upcast_gain(t: int, model: SyntheticDenoiser, schedule: NoiseSchedule, samples: np.ndarray) -> float:
    return DeviationMeter(model, schedule, samples).upcast_gain(t)


def downcast_loss(t: int, model: SyntheticDenoiser, schedule: NoiseSchedule, samples: np.ndarray) -> float:
    return DeviationMeter(model, schedule, samples).downcast_loss(t)


# -- gain profiles and scores -----------------------------------------------------


class GainKind(str, enum.Enum):
    UPCAST = "upcast"
    DOWNCAST = "downcast"


class Provenance(str, enum.Enum):
    MEASURED = "measured"
    INTERPOLATED = "interpolated"


@dataclass
class GainProfile:
    """Per-timestep gains ``Delta_t`` (index ``t - 1``) with their provenance."""

    kind: GainKind
    values: np.ndarray
    provenance: list[Provenance] = field(default_factory=list)

    def __post_init__(self):
        self.kind = GainKind(self.kind)
        self.values = np.asarray(self.values, dtype=float)
        if not self.provenance:
            self.provenance = [Provenance.MEASURED] * self.values.size
        self.provenance = [Provenance(p) for p in self.provenance]
        if self.values.ndim != 1 or len(self.provenance) != self.values.size:
            raise ShapeError("values and provenance must be 1-D of equal length")

    @property
    def T(self) -> int:
        return self.values.size

    def value(self, t: int) -> float:
        return float(self.values[t - 1])

    def measured_timesteps(self) -> list[int]:
        return [i + 1 for i, p in enumerate(self.provenance) if p is Provenance.MEASURED]

    @property
    def fully_measured(self) -> bool:
        return all(p is Provenance.MEASURED for p in self.provenance)

    def to_rows(self) -> list[dict]:
        return [
            {"t": t, "value": float(v), "kind": self.kind.value, "provenance": p.value}
            for t, (v, p) in enumerate(zip(self.values, self.provenance), start=1)
        ]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["t", "value", "kind", "provenance"])
            writer.writeheader()
            for row in self.to_rows():
                row["value"] = repr(row["value"])
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path: str | Path) -> GainProfile:
        with open(path, newline="") as fh:
            rows = sorted(csv.DictReader(fh), key=lambda r: int(r["t"]))
        if not rows:
            raise ParameterError(f"{path}: empty gain profile")
        kinds = {r["kind"] for r in rows}
        if len(kinds) != 1:
            raise ParameterError(f"{path}: mixed gain kinds {sorted(kinds)}")
        if [int(r["t"]) for r in rows] != list(range(1, len(rows) + 1)):
            raise ParameterError(f"{path}: timesteps must be 1..T without gaps")
        return cls(kinds.pop(), [float(r["value"]) for r in rows], [r["provenance"] for r in rows])


@dataclass(frozen=True)
class ScheduleScore:
    schedule: PrecisionSchedule
    s_up: float | None = None
    s_down: float | None = None


def gated_score(Z: PrecisionSchedule, values: Sequence[float]) -> float:
    """``-sum_t values_t z_t``; lower predicts a smaller final error."""
    values = np.asarray(values, dtype=float)
    if values.size != Z.T:
        raise ShapeError(f"{values.size} gains for a schedule of length {Z.T}")
    return -float(values @ Z.bits)


def score_schedule(Z: PrecisionSchedule, gains: GainProfile) -> ScheduleScore:
    score = gated_score(Z, gains.values)
    if gains.kind is GainKind.UPCAST:
        return ScheduleScore(Z, s_up=score)
    return ScheduleScore(Z, s_down=score)
