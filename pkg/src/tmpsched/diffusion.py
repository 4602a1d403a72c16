"""Deterministic DDIM reverse process over a synthetic linearised denoiser.

Timesteps run ``t = T, ..., 1``. A noise schedule stores ``alpha_T`` first and
``alpha_0`` last; every per-timestep array on the denoiser (Jacobians, biases,
quantization errors) is stored with row ``t - 1`` holding step ``t``.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ParameterError, ShapeError
from .seeding import substream

__all__ = [
    "NoiseSchedule",
    "StepCoefficients",
    "PrecisionSchedule",
    "Precision",
    "SyntheticDenoiser",
    "LatentTrajectory",
    "ERROR_PROFILES",
    "build_noise_schedule",
    "coefficients_from_alphas",
    "step_coefficients",
    "error_profile",
    "make_denoiser",
    "ddim_update",
    "ddim_step",
    "run_trajectory",
    "final_states",
    "nonlinear_fraction",
]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Sequence ``alpha_T, ..., alpha_0``; ``alpha_T`` is the noisiest."""

    alphas: np.ndarray

    def __post_init__(self):
        alphas = np.array(self.alphas, dtype=float)
        if alphas.ndim != 1 or alphas.size < 2:
            raise ParameterError("a noise schedule needs at least two alpha values")
        if np.any(alphas <= 0.0) or np.any(alphas > 1.0):
            raise ParameterError("every alpha must lie in (0, 1]")
        if np.any(np.diff(alphas) <= 0.0):
            raise ParameterError("alphas must strictly increase from t=T down to t=0")
        alphas.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)

    @property
    def T(self) -> int:
        return self.alphas.size - 1

    def alpha(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise IndexError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alphas[self.T - t])


@dataclass(frozen=True)
class StepCoefficients:
    a_scalar: float
    b: float


def build_noise_schedule(kind: str, T: int, alpha_min: float, alpha_max: float) -> NoiseSchedule:
    """Build a schedule ramping from ``alpha_min`` at ``t=T`` to ``alpha_max`` at ``t=0``.

    ``linear_alpha`` spaces values uniformly; ``cosine`` follows a squared-cosine
    ramp between the same endpoints. Endpoints are pinned exactly.
    """
    if int(T) != T or T < 2:
        raise ParameterError(f"T must be an integer >= 2, got {T}")
    if not 0.0 < alpha_min < alpha_max <= 1.0:
        raise ParameterError(f"need 0 < alpha_min < alpha_max <= 1, got {alpha_min}, {alpha_max}")
    T = int(T)
    if kind == "linear_alpha":
        alphas = np.linspace(alpha_min, alpha_max, T + 1)
    elif kind == "cosine":
        # position T - i is the timestep of entry i
        t = np.arange(T, -1, -1, dtype=float)
        ramp = np.cos(0.5 * np.pi * t / T) ** 2
        alphas = alpha_min + (alpha_max - alpha_min) * ramp
    else:
        raise ParameterError(f"unknown noise schedule kind {kind!r}")
    alphas[0] = alpha_min
    alphas[-1] = alpha_max
    return NoiseSchedule(alphas)


def coefficients_from_alphas(alpha_prev: float, alpha_t: float) -> StepCoefficients:
    """DDIM coefficients for the update ``x_{t-1} = a x_t + b mu``."""
    a_scalar = math.sqrt(alpha_prev / alpha_t)
    # written so that equal alphas cancel exactly
    b = math.sqrt(1.0 - alpha_prev) - a_scalar * math.sqrt(1.0 - alpha_t)
    return StepCoefficients(a_scalar, b)


def step_coefficients(schedule: NoiseSchedule, t: int) -> StepCoefficients:
    if not 1 <= t <= schedule.T:
        raise IndexError(f"timestep {t} outside [1, {schedule.T}]")
    return coefficients_from_alphas(schedule.alpha(t - 1), schedule.alpha(t))


class Precision(str, enum.Enum):
    FULL = "full"
    QUANTIZED = "quantized"


class PrecisionSchedule:
    """Binary vector ``z_1..z_T``; ``z_t = 1`` runs step ``t`` at full precision.

    The string form lists ``z_1`` first, e.g. ``"0010"`` upcasts only ``t = 3``.
    """

    __slots__ = ("_bits",)

    def __init__(self, bits: Iterable[int]):
        arr = np.array(list(bits) if not isinstance(bits, np.ndarray) else bits, dtype=np.int8)
        if arr.ndim != 1 or arr.size < 1:
            raise ShapeError("a precision schedule is a non-empty 1-D bit vector")
        if np.any((arr != 0) & (arr != 1)):
            raise ParameterError("precision schedule entries must be 0 or 1")
        arr.setflags(write=False)
        self._bits = arr

    @classmethod
    def zeros(cls, T: int) -> PrecisionSchedule:
        return cls(np.zeros(T, dtype=np.int8))

    @classmethod
    def ones(cls, T: int) -> PrecisionSchedule:
        return cls(np.ones(T, dtype=np.int8))

    @classmethod
    def one_hot(cls, T: int, t: int) -> PrecisionSchedule:
        if not 1 <= t <= T:
            raise IndexError(f"timestep {t} outside [1, {T}]")
        bits = np.zeros(T, dtype=np.int8)
        bits[t - 1] = 1
        return cls(bits)

    @classmethod
    def from_timesteps(cls, T: int, timesteps: Iterable[int]) -> PrecisionSchedule:
        bits = np.zeros(T, dtype=np.int8)
        for t in timesteps:
            if not 1 <= t <= T:
                raise IndexError(f"timestep {t} outside [1, {T}]")
            bits[t - 1] = 1
        return cls(bits)

    @classmethod
    def from_string(cls, text: str) -> PrecisionSchedule:
        text = text.strip()
        if not text or set(text) - {"0", "1"}:
            raise ParameterError(f"not a bit string: {text!r}")
        return cls([int(c) for c in text])

    @property
    def bits(self) -> np.ndarray:
        return self._bits

    @property
    def T(self) -> int:
        return self._bits.size

    def k(self) -> int:
        return int(self._bits.sum())

    def is_full(self, t: int) -> bool:
        return bool(self._bits[t - 1])

    def timesteps(self) -> list[int]:
        """Full-precision timesteps in ascending order."""
        return [int(i) + 1 for i in np.flatnonzero(self._bits)]

    def complement(self) -> PrecisionSchedule:
        return PrecisionSchedule(1 - self._bits)

    def to_string(self) -> str:
        return "".join(str(int(b)) for b in self._bits)

    def __len__(self):
        return self.T

    def __eq__(self, other):
        if not isinstance(other, PrecisionSchedule):
            return NotImplemented
        return np.array_equal(self._bits, other._bits)

    def __hash__(self):
        return hash(self._bits.tobytes())

    def __repr__(self):
        return f"PrecisionSchedule({self.to_string()!r})"


@dataclass(frozen=True, eq=False)
class SyntheticDenoiser:
    """Linearised noise predictor with an optional smooth nonlinearity.

    Full precision: ``mu(x, t) = J_t x + c_t + gamma * tanh(P x)``.
    Quantized: ``mu(x, t) + eps_t``.
    """

    jacobians: np.ndarray  # (T, d, d)
    biases: np.ndarray  # (T, d)
    quant_errors: np.ndarray  # (T, d)
    projection: np.ndarray  # (d, d)
    nonlinearity_scale: float = 0.0
    seed: int = 0
    spectral_bound: float = 1.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        errors = _frozen(self.quant_errors)
        if errors.ndim != 2:
            raise ShapeError("quant_errors must have shape (T, d)")
        T, d = errors.shape
        jac = _frozen(self.jacobians)
        if jac.ndim == 2:
            jac = np.broadcast_to(jac, (T, d, d))
        if jac.shape != (T, d, d):
            raise ShapeError(f"jacobians must have shape ({T}, {d}, {d}), got {jac.shape}")
        biases = _frozen(self.biases)
        projection = _frozen(self.projection)
        if biases.shape != (T, d):
            raise ShapeError(f"biases must have shape ({T}, {d})")
        if projection.shape != (d, d):
            raise ShapeError(f"projection must have shape ({d}, {d})")
        if self.nonlinearity_scale < 0:
            raise ParameterError("nonlinearity_scale must be >= 0")
        radius = max(_spectral_radius(j) for j in _unique_matrices(jac))
        if radius > self.spectral_bound * (1 + 1e-12):
            raise ParameterError(f"Jacobian spectral radius {radius:.6g} exceeds bound {self.spectral_bound}")
        for name, value in (("jacobians", jac), ("biases", biases), ("quant_errors", errors), ("projection", projection)):
            object.__setattr__(self, name, value)

    @property
    def T(self) -> int:
        return self.quant_errors.shape[0]

    @property
    def d(self) -> int:
        return self.quant_errors.shape[1]

    @property
    def is_linear(self) -> bool:
        return self.nonlinearity_scale == 0.0

    def jacobian(self, t: int) -> np.ndarray:
        return self.jacobians[t - 1]

    def error(self, t: int) -> np.ndarray:
        return self.quant_errors[t - 1]

    def predict(self, x: np.ndarray, t: int) -> np.ndarray:
        """Full-precision noise prediction for one latent ``(d,)`` or a batch ``(m, d)``."""
        mu = x @ self.jacobians[t - 1].T + self.biases[t - 1]
        if self.nonlinearity_scale:
            mu = mu + self.nonlinearity_scale * self.nonlinear_term(x)
        return mu

    def nonlinear_term(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.projection.T)

    def with_errors(self, quant_errors: np.ndarray) -> SyntheticDenoiser:
        quant_errors = np.asarray(quant_errors, dtype=float)
        if quant_errors.shape != self.quant_errors.shape:
            raise ShapeError(f"expected errors of shape {self.quant_errors.shape}")
        return replace(self, quant_errors=quant_errors)

    def with_nonlinearity(self, gamma: float) -> SyntheticDenoiser:
        return replace(self, nonlinearity_scale=float(gamma))


def _frozen(value) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.flags.writeable:
        arr = arr.copy()
        arr.setflags(write=False)
    return arr


def _unique_matrices(jac: np.ndarray):
    # broadcast views share one matrix; avoid T eigendecompositions
    if jac.strides[0] == 0:
        return [jac[0]]
    return list(jac)


def _spectral_radius(m: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(m))))


ERROR_PROFILES = ("constant", "front-loaded", "back-loaded", "spiky")


def error_profile(kind: str, T: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-timestep error magnitudes, index ``t - 1``, peak value 1.

    ``front-loaded`` concentrates magnitude at the start of the reverse
    process (large ``t``); ``spiky`` adds a few isolated bumps on top of it.
    """
    t = np.arange(1, T + 1, dtype=float)
    span = max(T - 1, 1)
    if kind == "constant":
        return np.ones(T)
    if kind == "front-loaded":
        return 0.1 + 0.9 * np.exp(-4.0 * (T - t) / span)
    if kind == "back-loaded":
        return 0.1 + 0.9 * np.exp(-4.0 * (t - 1) / span)
    if kind == "spiky":
        if rng is None:
            raise ParameterError("the spiky profile needs a random generator")
        base = 0.1 + 0.5 * np.exp(-4.0 * (T - t) / span)
        n_spikes = max(1, T // 5)
        where = rng.choice(T, size=n_spikes, replace=False)
        base[where] += rng.uniform(0.4, 0.9, size=n_spikes)
        return base / base.max()
    raise ParameterError(f"unknown error profile {kind!r}; expected one of {ERROR_PROFILES}")


def _random_jacobian(rng: np.random.Generator, d: int, spectral_radius: float) -> np.ndarray:
    j = rng.standard_normal((d, d))
    return j * (spectral_radius / _spectral_radius(j))


def make_denoiser(
    T: int,
    d: int,
    *,
    spectral_radius: float = 0.9,
    gamma: float = 0.0,
    error_profile_kind: str = "constant",
    error_scale: float = 0.1,
    error_correlation: float = 0.0,
    bias_scale: float = 0.1,
    per_step_jacobians: bool = False,
    spectral_bound: float = 1.0,
    seed: int = 0,
) -> SyntheticDenoiser:
    """Generate a seeded synthetic denoiser.

    ``error_scale`` is the expected L2 norm of the largest ``eps_t``.
    ``error_correlation`` in ``[0, 1]`` blends a direction shared by every
    timestep into the otherwise independent Gaussian errors.
    """
    if T < 1 or d < 1:
        raise ParameterError("T and d must be positive")
    if not 0 < spectral_radius <= spectral_bound:
        raise ParameterError(f"spectral_radius must lie in (0, {spectral_bound}]")
    if not 0.0 <= error_correlation <= 1.0:
        raise ParameterError("error_correlation must lie in [0, 1]")
    if error_scale < 0 or bias_scale < 0 or gamma < 0:
        raise ParameterError("scales must be non-negative")

    jac_rng = substream(seed, "model.jacobian")
    if per_step_jacobians:
        jacobians = np.stack([_random_jacobian(jac_rng, d, spectral_radius) for _ in range(T)])
    else:
        jacobians = _random_jacobian(jac_rng, d, spectral_radius)
    biases = bias_scale * substream(seed, "model.bias").standard_normal((T, d)) / math.sqrt(d)
    projection = substream(seed, "model.projection").standard_normal((d, d)) / math.sqrt(d)

    err_rng = substream(seed, "errors")
    magnitudes = error_profile(error_profile_kind, T, err_rng)
    shared = err_rng.standard_normal(d)
    shared *= math.sqrt(d) / np.linalg.norm(shared)
    noise = err_rng.standard_normal((T, d))
    rho = error_correlation
    directions = rho * shared + math.sqrt(1.0 - rho * rho) * noise
    quant_errors = (error_scale / math.sqrt(d)) * magnitudes[:, None] * directions

    return SyntheticDenoiser(
        jacobians=jacobians,
        biases=biases,
        quant_errors=quant_errors,
        projection=projection,
        nonlinearity_scale=float(gamma),
        seed=int(seed),
        spectral_bound=spectral_bound,
        metadata={"error_profile": error_profile_kind, "magnitudes": magnitudes},
    )


@dataclass(frozen=True, eq=False)
class LatentTrajectory:
    """States ``x_T, x_{T-1}, ..., x_0`` in that order."""

    states: np.ndarray  # (T + 1, d)

    @property
    def T(self) -> int:
        return self.states.shape[0] - 1

    def at(self, t: int) -> np.ndarray:
        return self.states[self.T - t]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "component", "value"])
            for i, state in enumerate(self.states):
                t = self.T - i
                for k, value in enumerate(state):
                    writer.writerow([t, k, repr(float(value))])

    @classmethod
    def from_csv(cls, path: str | Path) -> LatentTrajectory:
        rows = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rows[(int(row["t"]), int(row["component"]))] = float(row["value"])
        T = max(t for t, _ in rows)
        d = max(k for _, k in rows) + 1
        states = np.empty((T + 1, d))
        for (t, k), value in rows.items():
            states[T - t, k] = value
        return cls(states)


def _check_latent(x: np.ndarray, model: SyntheticDenoiser) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2) or x.shape[-1] != model.d:
        raise ShapeError(f"latent must have trailing dimension {model.d}, got shape {x.shape}")
    return x


def _check_lengths(model: SyntheticDenoiser, schedule: NoiseSchedule, Z: PrecisionSchedule | None = None):
    if model.T != schedule.T:
        raise ShapeError(f"model has {model.T} timesteps but noise schedule has {schedule.T}")
    if Z is not None and Z.T != schedule.T:
        raise ShapeError(f"precision schedule has {Z.T} entries, expected {schedule.T}")


def ddim_update(x: np.ndarray, mu: np.ndarray, coeffs: StepCoefficients) -> np.ndarray:
    return coeffs.a_scalar * x + coeffs.b * mu


def ddim_step(
    x: np.ndarray,
    t: int,
    model: SyntheticDenoiser,
    schedule: NoiseSchedule,
    precision: Precision | str = Precision.FULL,
) -> np.ndarray:
    """One reverse step ``x_t -> x_{t-1}``; works on a single latent or a batch."""
    x = _check_latent(x, model)
    coeffs = step_coefficients(schedule, t)
    mu = model.predict(x, t)
    if Precision(precision) is Precision.QUANTIZED:
        mu = mu + model.quant_errors[t - 1]
    return ddim_update(x, mu, coeffs)


def run_trajectory(
    x_init: np.ndarray,
    Z: PrecisionSchedule,
    model: SyntheticDenoiser,
    schedule: NoiseSchedule,
) -> LatentTrajectory:
    x = _check_latent(x_init, model)
    if x.ndim != 1:
        raise ShapeError("run_trajectory takes a single latent; use final_states for batches")
    _check_lengths(model, schedule, Z)
    states = [x]
    for t in range(schedule.T, 0, -1):
        precision = Precision.FULL if Z.is_full(t) else Precision.QUANTIZED
        x = ddim_step(x, t, model, schedule, precision)
        states.append(x)
    return LatentTrajectory(np.stack(states))


def final_states(
    samples: np.ndarray,
    Z: PrecisionSchedule,
    model: SyntheticDenoiser,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Final latents ``x_0`` for a batch of initial latents, shape ``(m, d)``."""
    x = _check_latent(np.atleast_2d(samples), model)
    _check_lengths(model, schedule, Z)
    for t in range(schedule.T, 0, -1):
        precision = Precision.FULL if Z.is_full(t) else Precision.QUANTIZED
        x = ddim_step(x, t, model, schedule, precision)
    return x


def nonlinear_fraction(model: SyntheticDenoiser, schedule: NoiseSchedule, samples: np.ndarray) -> float:
    """Mean ratio ``||gamma g(x)|| / ||J x + c||`` along full-precision trajectories."""
    x = _check_latent(np.atleast_2d(samples), model)
    _check_lengths(model, schedule)
    ratios = []
    for t in range(schedule.T, 0, -1):
        linear = x @ model.jacobians[t - 1].T + model.biases[t - 1]
        nonlin = model.nonlinearity_scale * model.nonlinear_term(x)
        ratios.append(np.linalg.norm(nonlin, axis=1) / np.linalg.norm(linear, axis=1))
        x = ddim_update(x, linear + nonlin, step_coefficients(schedule, t))
    return float(np.mean(ratios))


def as_schedule(Z: PrecisionSchedule | Sequence[int] | str) -> PrecisionSchedule:
    if isinstance(Z, PrecisionSchedule):
        return Z
    if isinstance(Z, str):
        return PrecisionSchedule.from_string(Z)
    return PrecisionSchedule(Z)
