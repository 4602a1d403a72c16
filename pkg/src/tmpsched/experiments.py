"""End-to-end experiments composed from the core modules.

Every function takes an :class:`ExperimentConfig`, performs all computation and
returns a report object; writing files is left to the caller.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .diffusion import PrecisionSchedule
from .error_model import SCHEMA_VERSION, DeviationMeter, GainKind, GainProfile, gated_score
from .exceptions import ConfigError, ParameterError, UndefinedCorrelationError
from .scheduler import (
    LatencyBudget,
    LipschitzDiagnostic,
    NonPositiveGainWarning,
    RankDeviationCurve,
    adaptive_bisection,
    brute_force_optimal,
    compute_budget,
    end_placement_schedule,
    greedy_topk,
    initial_anchors,
    lipschitz_report,
    mix_models_schedule,
    rank_deviation_curve,
    speedup_for_k,
)
from .seeding import substream
from .stats import CorrelationSummary, correlate

RANK_CURVE_KS = (2, 3, 4, 5)


def _check_schema(data: dict) -> None:
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ParameterError(f"unsupported report schema {data.get('schema_version')!r}")


def _safe_correlate(xs, ys) -> CorrelationSummary | None:
    try:
        return correlate(xs, ys)
    except UndefinedCorrelationError:
        return None


def _setup(cfg: ExperimentConfig, two_model: bool = False) -> DeviationMeter:
    schedule = cfg.noise_schedule()
    model = cfg.two_model_denoiser(schedule) if two_model else cfg.denoiser(schedule)
    return DeviationMeter(model, schedule, cfg.calibration_samples())


# -- additivity validation --------------------------------------------------------


def random_schedules(rng: np.random.Generator, T: int, K: int, n: int) -> list[PrecisionSchedule]:
    return [PrecisionSchedule.from_timesteps(T, rng.choice(T, size=K, replace=False) + 1) for _ in range(n)]


@dataclass
class AdditivityReport:
    upcast: GainProfile
    downcast: GainProfile
    single_step: CorrelationSummary | None
    # rows of (K, schedule bits, s_up, s_down, E, variance)
    pairs: list[dict]
    per_k: dict[str, dict[int, CorrelationSummary | None]]
    pooled: dict[str, CorrelationSummary | None]

    def correlation_rows(self) -> list[dict]:
        rows = []
        for predictor in ("s_up", "s_down"):
            for K, summary in self.per_k[predictor].items():
                if summary is not None:
                    rows.append(summary.csv_row(K=K, predictor=predictor))
            if self.pooled[predictor] is not None:
                rows.append(self.pooled[predictor].csv_row(K="all", predictor=predictor))
        return rows

    def to_dict(self) -> dict:
        def dump(s):
            return None if s is None else s.to_dict()

        return {
            "schema_version": SCHEMA_VERSION,
            "upcast": [float(v) for v in self.upcast.values],
            "downcast": [float(v) for v in self.downcast.values],
            "single_step": dump(self.single_step),
            "pairs": self.pairs,
            "per_k": {p: {str(k): dump(s) for k, s in m.items()} for p, m in self.per_k.items()},
            "pooled": {p: dump(s) for p, s in self.pooled.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> AdditivityReport:
        _check_schema(data)

        def load(s):
            return None if s is None else CorrelationSummary.from_dict(s)

        return cls(
            upcast=GainProfile(GainKind.UPCAST, data["upcast"]),
            downcast=GainProfile(GainKind.DOWNCAST, data["downcast"]),
            single_step=load(data["single_step"]),
            pairs=data["pairs"],
            per_k={p: {int(k): load(s) for k, s in m.items()} for p, m in data["per_k"].items()},
            pooled={p: load(s) for p, s in data["pooled"].items()},
        )


def validate_additivity(cfg: ExperimentConfig, meter: DeviationMeter | None = None) -> AdditivityReport:
    """Single-step gain curves plus random multi-step schedules scored against measured E."""
    meter = meter or _setup(cfg)
    T = meter.T
    up = meter.gain_profile(GainKind.UPCAST)
    down = meter.gain_profile(GainKind.DOWNCAST)
    rng = substream(cfg.seed, "schedule-sampling")
    ks = cfg.effective_validation_ks
    pairs = []
    for K in ks:
        for Z in random_schedules(rng, T, K, cfg.schedules_per_k):
            rep = meter.report(Z)
            pairs.append(
                {
                    "K": K,
                    "schedule": Z.to_string(),
                    "s_up": gated_score(Z, up.values),
                    "s_down": gated_score(Z, down.values),
                    "E": rep.e_scalar,
                    "variance": rep.variance,
                }
            )
    per_k: dict[str, dict[int, CorrelationSummary | None]] = {"s_up": {}, "s_down": {}}
    pooled = {}
    for predictor in per_k:
        for K in ks:
            sub = [p for p in pairs if p["K"] == K]
            per_k[predictor][K] = _safe_correlate([p[predictor] for p in sub], [p["E"] for p in sub])
        pooled[predictor] = _safe_correlate([p[predictor] for p in pairs], [p["E"] for p in pairs])
    return AdditivityReport(up, down, _safe_correlate(up.values, down.values), pairs, per_k, pooled)


# -- calibration ------------------------------------------------------------------


def resolve_k(cfg: ExperimentConfig) -> tuple[int, LatencyBudget | None]:
    if cfg.K is not None:
        return cfg.K, None
    if cfg.speedup is None or cfg.lam is None:
        raise ConfigError("set either K, or both speedup and lam")
    budget = compute_budget(cfg.T, cfg.speedup, cfg.lam)
    return budget.K, budget


@dataclass
class CalibrationReport:
    T: int
    K: int
    sampling_budget: int
    anchors: list[int]
    measurement_order: list[int]
    gains: GainProfile
    schedule: PrecisionSchedule
    schedule_error: float
    lipschitz: LipschitzDiagnostic
    evaluations: int
    budget: LatencyBudget | None = None
    reference: GainProfile | None = None
    rank_deviation: RankDeviationCurve | None = None
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "T": self.T,
            "K": self.K,
            "sampling_budget": self.sampling_budget,
            "anchors": self.anchors,
            "measurement_order": self.measurement_order,
            "gain_profile": self.gains.to_rows(),
            "interpolated": [r["t"] for r in self.gains.to_rows() if r["provenance"] == "interpolated"],
            "schedule_bits": self.schedule.to_string(),
            "schedule_error": self.schedule_error,
            "lipschitz": self.lipschitz.to_dict(),
            "evaluations": self.evaluations,
            "latency_budget": None
            if self.budget is None
            else {"T": self.budget.T, "r": self.budget.r, "lam": self.budget.lam, "K": self.budget.K},
            "reference_profile": None if self.reference is None else self.reference.to_rows(),
            "rank_deviation": None if self.rank_deviation is None else self.rank_deviation.to_dict(),
            "warnings": self.warnings,
        }

    @classmethod
    def from_dict(cls, data: dict) -> CalibrationReport:
        _check_schema(data)

        def profile(rows):
            return GainProfile(rows[0]["kind"], [r["value"] for r in rows], [r["provenance"] for r in rows])

        lb = data["latency_budget"]
        return cls(
            T=data["T"],
            K=data["K"],
            sampling_budget=data["sampling_budget"],
            anchors=list(data["anchors"]),
            measurement_order=list(data["measurement_order"]),
            gains=profile(data["gain_profile"]),
            schedule=PrecisionSchedule.from_string(data["schedule_bits"]),
            schedule_error=data["schedule_error"],
            lipschitz=LipschitzDiagnostic(**data["lipschitz"]),
            evaluations=data["evaluations"],
            budget=None if lb is None else LatencyBudget(**lb),
            reference=None if data["reference_profile"] is None else profile(data["reference_profile"]),
            rank_deviation=None if data["rank_deviation"] is None else RankDeviationCurve.from_dict(data["rank_deviation"]),
            warnings=list(data["warnings"]),
        )


def _greedy(gains: GainProfile, K: int, log: list[str]) -> PrecisionSchedule:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NonPositiveGainWarning)
        Z = greedy_topk(gains, K)
    log.extend(str(w.message) for w in caught if issubclass(w.category, NonPositiveGainWarning))
    return Z


def calibrate(
    cfg: ExperimentConfig, full_measure: bool = False, meter: DeviationMeter | None = None
) -> CalibrationReport:
    """Budget, adaptive bisection, interpolation and greedy top-K selection.

    With ``full_measure`` every timestep is also measured as a reference and
    the rank-deviation curve of the bisection estimate is reported.
    """
    K, budget = resolve_k(cfg)
    meter = meter or _setup(cfg)
    T = meter.T
    B = cfg.effective_budget
    state = adaptive_bisection(meter.upcast_gain, T, B)
    gains = state.profile(GainKind.UPCAST)
    evaluations = meter.evaluations
    log: list[str] = []
    Z = _greedy(gains, K, log)
    reference = curve = None
    if full_measure:
        reference = meter.gain_profile(GainKind.UPCAST)
        Ks = sorted({k for k in (*RANK_CURVE_KS, K) if 1 <= k < T})
        curve = rank_deviation_curve(state, reference, Ks)
    return CalibrationReport(
        T=T,
        K=K,
        sampling_budget=B,
        anchors=initial_anchors(T),
        measurement_order=list(state.order),
        gains=gains,
        schedule=Z,
        schedule_error=meter.E(Z),
        lipschitz=lipschitz_report(gains, K),
        evaluations=evaluations,
        budget=budget,
        reference=reference,
        rank_deviation=curve,
        warnings=log,
    )


# -- pareto sweep -----------------------------------------------------------------


@dataclass
class ParetoReport:
    rows: list[dict]  # K, speedup, E, schedule
    monotone: bool
    strictly_decreasing_where_positive: bool


def pareto(cfg: ExperimentConfig, Ks=None, full_measure: bool = False, meter: DeviationMeter | None = None) -> ParetoReport:
    """Greedy schedules for a sweep of K with modelled speedup and measured error."""
    if cfg.lam is None:
        raise ConfigError("config field 'lam': the pareto sweep needs the per-step speedup")
    Ks = sorted(set(Ks if Ks is not None else (cfg.pareto_ks or range(cfg.T + 1))))
    if any(not 0 <= k <= cfg.T for k in Ks):
        raise ConfigError(f"pareto K values must lie in [0, {cfg.T}]")
    meter = meter or _setup(cfg)
    B = meter.T if full_measure else cfg.effective_budget
    gains = adaptive_bisection(meter.upcast_gain, meter.T, B).profile(GainKind.UPCAST)
    rows, log = [], []
    for K in Ks:
        Z = _greedy(gains, K, log)
        rows.append({"K": K, "speedup": speedup_for_k(meter.T, K, cfg.lam), "E": meter.E(Z), "schedule": Z.to_string()})
    errors = [r["E"] for r in rows]
    monotone = all(b <= a for a, b in zip(errors, errors[1:]))
    order = np.sort(gains.values)[::-1]
    strict = True
    for prev, cur in zip(rows, rows[1:]):
        added = order[prev["K"] : cur["K"]]
        if np.all(added > 0) and not cur["E"] < prev["E"]:
            strict = False
    return ParetoReport(rows, monotone, strict)


# -- mix of models ----------------------------------------------------------------


@dataclass
class MixModelsReport:
    sensitivity: GainProfile
    ours: PrecisionSchedule
    heuristic: PrecisionSchedule
    error_ours: float
    error_heuristic: float
    error_all_small: float

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "sensitivity": [float(v) for v in self.sensitivity.values],
            "ours": self.ours.to_string(),
            "heuristic": self.heuristic.to_string(),
            "error_ours": self.error_ours,
            "error_heuristic": self.error_heuristic,
            "error_all_small": self.error_all_small,
        }

    @classmethod
    def from_dict(cls, data: dict) -> MixModelsReport:
        _check_schema(data)
        return cls(
            sensitivity=GainProfile(GainKind.DOWNCAST, data["sensitivity"]),
            ours=PrecisionSchedule.from_string(data["ours"]),
            heuristic=PrecisionSchedule.from_string(data["heuristic"]),
            error_ours=data["error_ours"],
            error_heuristic=data["error_heuristic"],
            error_all_small=data["error_all_small"],
        )


def mix_models(cfg: ExperimentConfig, meter: DeviationMeter | None = None) -> MixModelsReport:
    """Sensitivity-based small/large assignment versus small-model-at-the-end."""
    meter = meter or _setup(cfg, two_model=True)
    sens = meter.gain_profile(GainKind.DOWNCAST)
    ours = mix_models_schedule(sens, cfg.k_small)
    heuristic = end_placement_schedule(meter.T, cfg.k_small)
    return MixModelsReport(
        sensitivity=sens,
        ours=ours,
        heuristic=heuristic,
        error_ours=meter.E(ours),
        error_heuristic=meter.E(heuristic),
        error_all_small=meter.E(PrecisionSchedule.zeros(meter.T)),
    )


# -- brute force comparison -------------------------------------------------------


@dataclass
class BruteForceReport:
    K: int
    greedy: PrecisionSchedule
    greedy_error: float
    optimum: PrecisionSchedule
    optimum_error: float
    enumerated: int

    @property
    def gap(self) -> float:
        return self.greedy_error - self.optimum_error

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "K": self.K,
            "greedy": self.greedy.to_string(),
            "greedy_error": self.greedy_error,
            "optimum": self.optimum.to_string(),
            "optimum_error": self.optimum_error,
            "gap": self.gap,
            "enumerated": self.enumerated,
        }

    @classmethod
    def from_dict(cls, data: dict) -> BruteForceReport:
        _check_schema(data)
        return cls(
            K=data["K"],
            greedy=PrecisionSchedule.from_string(data["greedy"]),
            greedy_error=data["greedy_error"],
            optimum=PrecisionSchedule.from_string(data["optimum"]),
            optimum_error=data["optimum_error"],
            enumerated=data["enumerated"],
        )


def brute_force(cfg: ExperimentConfig, meter: DeviationMeter | None = None) -> BruteForceReport:
    """Greedy selection on fully measured gains against exhaustive search."""
    K, _ = resolve_k(cfg)
    meter = meter or _setup(cfg)
    gains = meter.gain_profile(GainKind.UPCAST)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonPositiveGainWarning)
        Z = greedy_topk(gains, K)
    best, best_e = brute_force_optimal(meter.model, meter.schedule, meter.samples, K, cfg.enumeration_cap, meter)
    return BruteForceReport(K, Z, meter.E(Z), best, best_e, math.comb(meter.T, K))
