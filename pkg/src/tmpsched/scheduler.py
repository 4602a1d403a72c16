"""Latency budgets, adaptive-bisection calibration and schedule selection."""

from __future__ import annotations

import functools
import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .diffusion import NoiseSchedule, PrecisionSchedule, SyntheticDenoiser, make_denoiser
from .error_model import DeviationMeter, GainKind, GainProfile, Provenance
from .exceptions import CapacityError, InfeasibleTargetError, ParameterError

DEFAULT_ENUMERATION_CAP = 2**20
# Relative slack when flooring K and checking feasibility, so that r(K) fed
# back in recovers K despite rounding.
_FLOOR_SLACK = 1e-9


class NonPositiveGainWarning(UserWarning):
    """The budget forces selection of timesteps whose gain is not positive."""


# -- latency budget ---------------------------------------------------------------


def speedup_for_k(T: int, K: int, lam: float) -> float:
    """Modelled end-to-end speedup with ``K`` full-precision steps out of ``T``."""
    if not 0 <= K <= T:
        raise ParameterError(f"K={K} outside [0, {T}]")
    return T / (K + (T - K) / lam)


@dataclass(frozen=True)
class LatencyBudget:
    T: int
    r: float
    lam: float
    K: int

    @property
    def exact_k(self) -> float:
        return self.T * (self.lam - self.r) / (self.r * (self.lam - 1.0))

    def speedup(self) -> float:
        return speedup_for_k(self.T, self.K, self.lam)


def compute_budget(T: int, r: float, lam: float) -> LatencyBudget:
    """Number of full-precision steps a target speedup ``r`` allows (Amdahl's law)."""
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if lam <= 1.0:
        raise ParameterError(f"per-step speedup lambda must exceed 1, got {lam}")
    if r <= 1.0:
        raise ParameterError(f"target speedup must exceed 1, got {r}")
    if r > lam * (1.0 + _FLOOR_SLACK):
        raise InfeasibleTargetError(f"target speedup {r} exceeds per-step speedup {lam}")
    exact = T * (lam - r) / (r * (lam - 1.0))
    K = math.floor(exact + _FLOOR_SLACK * max(1.0, exact))
    return LatencyBudget(T=T, r=r, lam=lam, K=min(max(K, 0), T))


# -- adaptive bisection -----------------------------------------------------------


def initial_anchors(T: int) -> list[int]:
    return sorted({1, T // 2, T})


def default_budget(T: int) -> int:
    return min(T, 13)


@dataclass
class BisectionState:
    """Measured timesteps, in measurement order, and the sampling budget."""

    T: int
    budget: int
    measurements: dict[int, float] = field(default_factory=dict)
    order: list[int] = field(default_factory=list)

    @property
    def anchors(self) -> list[int]:
        return sorted(self.measurements)

    def record(self, t: int, value: float) -> None:
        if t in self.measurements:
            raise ParameterError(f"timestep {t} measured twice")
        self.measurements[t] = float(value)
        self.order.append(t)

    def segments(self) -> list[tuple[int, int]]:
        """Adjacent measured pairs ``(t_L, t_R)`` that enclose unmeasured timesteps."""
        a = self.anchors
        return [(lo, hi) for lo, hi in zip(a, a[1:]) if hi - lo > 1]

    def segment_score(self, seg: tuple[int, int]) -> float:
        lo, hi = seg
        return 0.5 * (self.measurements[lo] + self.measurements[hi])

    def best_segment(self) -> tuple[int, int] | None:
        segs = self.segments()
        if not segs:
            return None
        # highest score, then widest, then leftmost
        return max(segs, key=lambda s: (self.segment_score(s), s[1] - s[0], -s[0]))

    def done(self) -> bool:
        return len(self.measurements) >= self.budget or not self.segments()

    def profile(self, kind: GainKind | str = GainKind.UPCAST) -> GainProfile:
        return interpolate_gains(self.T, self.measurements, kind)


def interpolate_gains(
    T: int, measurements: dict[int, float], kind: GainKind | str = GainKind.UPCAST
) -> GainProfile:
    """Piecewise-linear fill between measured timesteps; constant beyond the ends."""
    if not measurements:
        raise ParameterError("cannot interpolate without measurements")
    ts = np.array(sorted(measurements), dtype=float)
    vs = np.array([measurements[int(t)] for t in ts])
    grid = np.arange(1, T + 1, dtype=float)
    values = np.interp(grid, ts, vs)
    for t, v in measurements.items():
        values[t - 1] = v
    prov = [Provenance.MEASURED if t in measurements else Provenance.INTERPOLATED for t in range(1, T + 1)]
    return GainProfile(kind, values, prov)


def adaptive_bisection(
    measure: Callable[[int], float],
    T: int,
    budget: int,
    on_measure: Callable[[BisectionState], None] | None = None,
) -> BisectionState:
    """Run anchor-initialised adaptive bisection against an arbitrary gain oracle.

    ``on_measure`` is called after the anchors and after every later measurement.
    """
    if T < 3:
        raise ParameterError(f"adaptive bisection needs T >= 3, got {T}")
    if budget < 3:
        raise ParameterError(f"sampling budget must be >= 3, got {budget}")
    state = BisectionState(T=T, budget=min(budget, T))
    for t in initial_anchors(T):
        state.record(t, measure(t))
    if on_measure:
        on_measure(state)
    while not state.done():
        lo, hi = state.best_segment()
        mid = (lo + hi) // 2
        state.record(mid, measure(mid))
        if on_measure:
            on_measure(state)
    return state


def bisection_calibrate(
    model: SyntheticDenoiser,
    schedule: NoiseSchedule,
    samples: np.ndarray,
    B: int | None = None,
    meter: DeviationMeter | None = None,
) -> tuple[GainProfile, BisectionState]:
    """Measure upcasting gains at ``B`` adaptively chosen timesteps and interpolate the rest."""
    meter = meter or DeviationMeter(model, schedule, samples)
    B = default_budget(schedule.T) if B is None else B
    state = adaptive_bisection(meter.upcast_gain, schedule.T, B)
    return state.profile(GainKind.UPCAST), state


# -- schedule selection -----------------------------------------------------------


def _check_k(K: int, T: int) -> None:
    if int(K) != K or not 0 <= K <= T:
        raise ParameterError(f"K={K} outside [0, {T}]")


def greedy_topk(gains: GainProfile, K: int) -> PrecisionSchedule:
    """Full precision for the ``K`` largest gains; ties go to the smaller timestep."""
    _check_k(K, gains.T)
    order = sorted(range(gains.T), key=lambda i: (-gains.values[i], i))
    chosen = order[:K]
    n_positive = int(np.sum(gains.values > 0))
    if K > n_positive:
        warnings.warn(
            f"budget K={K} exceeds the {n_positive} timesteps with positive gain",
            NonPositiveGainWarning,
            stacklevel=2,
        )
    return PrecisionSchedule.from_timesteps(gains.T, (i + 1 for i in chosen))


def enumerate_errors(
    meter: DeviationMeter, K: int, cap: int = DEFAULT_ENUMERATION_CAP
) -> list[tuple[PrecisionSchedule, float]]:
    """Measured ``E(Z)`` for every schedule with ``|Z| = K``, in lexicographic timestep order."""
    T = meter.T
    _check_k(K, T)
    count = math.comb(T, K)
    if count > cap:
        raise CapacityError(f"C({T}, {K}) = {count} schedules exceeds the cap of {cap}")
    return [
        (Z, meter.E(Z))
        for Z in (PrecisionSchedule.from_timesteps(T, combo) for combo in itertools.combinations(range(1, T + 1), K))
    ]


def brute_force_optimal(
    model: SyntheticDenoiser,
    schedule: NoiseSchedule,
    samples: np.ndarray,
    K: int,
    cap: int = DEFAULT_ENUMERATION_CAP,
    meter: DeviationMeter | None = None,
) -> tuple[PrecisionSchedule, float]:
    """Exhaustive minimiser of ``E(Z)`` over ``|Z| = K``.

    Exact ties keep the schedule whose sorted full-precision timesteps come first
    lexicographically, the same preference greedy selection has for small ``t``.
    """
    meter = meter or DeviationMeter(model, schedule, samples)
    best, best_e = None, math.inf
    for Z, e in enumerate_errors(meter, K, cap):
        if e < best_e:
            best, best_e = Z, e
    return best, best_e


@dataclass(frozen=True)
class LipschitzDiagnostic:
    K: int
    lipschitz: float
    epsilon: float
    delta_k: float | None
    certified: bool | None
    n_measured: int

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "lipschitz": self.lipschitz,
            "epsilon": self.epsilon,
            "delta_k": self.delta_k,
            "certified": self.certified,
            "n_measured": self.n_measured,
        }


def lipschitz_report(gains: GainProfile, K: int) -> LipschitzDiagnostic:
    """Sufficient condition ``2 * eps < Delta_K`` for the interpolated top-K set.

    ``L`` is the steepest slope between adjacent measured points and ``eps``
    the largest ``L / 2 * (t_R - t_L)`` over segments with unmeasured interior.
    ``Delta_K`` is the gap between the K-th and (K+1)-th largest measured gains;
    it is undefined (``None``) unless ``1 <= K < n_measured``.
    """
    ts = gains.measured_timesteps()
    if len(ts) < 2:
        raise ParameterError("a Lipschitz estimate needs at least two measured timesteps")
    vs = [gains.value(t) for t in ts]
    slopes = [abs(v1 - v0) / (t1 - t0) for (t0, v0), (t1, v1) in zip(zip(ts, vs), zip(ts[1:], vs[1:]))]
    L = max(slopes)
    widths = [t1 - t0 for t0, t1 in zip(ts, ts[1:]) if t1 - t0 > 1]
    eps = 0.5 * L * max(widths) if widths else 0.0
    delta_k = certified = None
    if 1 <= K < len(ts):
        ranked = sorted(vs, reverse=True)
        delta_k = ranked[K - 1] - ranked[K]
        certified = 2.0 * eps < delta_k
    return LipschitzDiagnostic(K, L, eps, delta_k, certified, len(ts))


@functools.lru_cache(maxsize=32)
def _combinations(T: int, K: int) -> np.ndarray:
    return np.array(list(itertools.combinations(range(T), K)), dtype=np.intp).reshape(-1, K)


def rank_deviation(estimated: PrecisionSchedule | Iterable[int], reference_gains: GainProfile, K: int) -> int:
    """Position of ``estimated`` among all ``|Z| = K`` schedules ordered by reference score.

    Counts schedules whose reference score is strictly better; 0 means the
    estimate is optimal for the reference gains.
    """
    T = reference_gains.T
    _check_k(K, T)
    if not reference_gains.fully_measured:
        raise ParameterError("the reference gain profile must be fully measured")
    if isinstance(estimated, PrecisionSchedule):
        chosen = estimated.timesteps()
    else:
        chosen = sorted(set(estimated))
    if len(chosen) != K:
        raise ParameterError(f"estimated schedule has {len(chosen)} steps, expected K={K}")
    v = reference_gains.values
    own = float(sum(v[t - 1] for t in chosen))
    sums = v[_combinations(T, K)].sum(axis=1)
    tol = 1e-12 * max(1.0, float(np.abs(v).sum()))
    return int(np.count_nonzero(sums > own + tol))


@dataclass
class RankDeviationCurve:
    """``deviations[K][i]`` is the rank deviation after ``i`` post-anchor measurements."""

    deviations: dict[int, list[int]]

    def converged_at(self, K: int) -> int | None:
        """First iteration from which the deviation stays at zero."""
        devs = self.deviations[K]
        for i in range(len(devs)):
            if all(d == 0 for d in devs[i:]):
                return i
        return None

    def to_dict(self) -> dict:
        return {str(k): list(v) for k, v in self.deviations.items()}

    @classmethod
    def from_dict(cls, data: dict) -> RankDeviationCurve:
        return cls({int(k): [int(x) for x in v] for k, v in data.items()})


def rank_deviation_curve(
    state: BisectionState, reference: GainProfile, Ks: Sequence[int]
) -> RankDeviationCurve:
    """Replay the measurement order and score each intermediate top-K estimate."""
    n_anchor = len(initial_anchors(state.T))
    out: dict[int, list[int]] = {int(K): [] for K in Ks}
    for n in range(n_anchor, len(state.order) + 1):
        seen = {t: state.measurements[t] for t in state.order[:n]}
        profile = interpolate_gains(state.T, seen)
        for K in out:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", NonPositiveGainWarning)
                estimate = greedy_topk(profile, K)
            out[K].append(rank_deviation(estimate, reference, K))
    return RankDeviationCurve(out)


# -- mixing models ----------------------------------------------------------------


def make_two_model_denoiser(
    T: int,
    d: int,
    *,
    seed: int = 0,
    substitution_profile: str = "spiky",
    substitution_scale: float = 0.1,
    substitution_correlation: float = 0.9,
    **kwargs,
) -> SyntheticDenoiser:
    """Large denoiser whose "quantized" branch is a smaller substitute model.

    The small model predicts ``mu_large + eta_t``; ``eta_t`` takes the place of
    the quantization error, so every precision tool applies unchanged with
    ``z_t = 1`` meaning the large model runs step ``t``.
    """
    return make_denoiser(
        T,
        d,
        seed=seed,
        error_profile_kind=substitution_profile,
        error_scale=substitution_scale,
        error_correlation=substitution_correlation,
        **kwargs,
    )


def mix_models_schedule(sensitivity: GainProfile, K_small: int) -> PrecisionSchedule:
    """Small model on the ``K_small`` least sensitive timesteps; ties go to smaller ``t``."""
    _check_k(K_small, sensitivity.T)
    order = sorted(range(sensitivity.T), key=lambda i: (sensitivity.values[i], i))
    small = {i + 1 for i in order[:K_small]}
    return PrecisionSchedule.from_timesteps(sensitivity.T, (t for t in range(1, sensitivity.T + 1) if t not in small))


def end_placement_schedule(T: int, K_small: int) -> PrecisionSchedule:
    """Heuristic baseline: small model on the last ``K_small`` denoising steps (t = 1..K_small)."""
    _check_k(K_small, T)
    return PrecisionSchedule.from_timesteps(T, range(K_small + 1, T + 1))
