"""Temporal mixed-precision scheduling for iterative denoising processes."""

from .diffusion import (
    NoiseSchedule,
    PrecisionSchedule,
    SyntheticDenoiser,
    build_noise_schedule,
    make_denoiser,
    run_trajectory,
)
from .error_model import DeviationMeter, GainProfile, ansatz_delta0, closed_form_delta0, measure_E
from .scheduler import bisection_calibrate, brute_force_optimal, compute_budget, greedy_topk
from .stats import correlate

__version__ = "0.1.0"
