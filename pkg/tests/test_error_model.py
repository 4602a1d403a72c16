import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmpsched.diffusion import NoiseSchedule, PrecisionSchedule, build_noise_schedule, make_denoiser, run_trajectory
from tmpsched.error_model import (
    DeviationMeter,
    DeviationReport,
    GainProfile,
    ansatz_delta0,
    closed_form_delta0,
    contributions,
    downcast_loss,
    gated_score,
    measure_E,
    per_step_contribution,
    score_schedule,
    upcast_gain,
    with_aligned_contributions,
    with_orthogonal_contributions,
)
from tmpsched.exceptions import ParameterError, ShapeError
from tmpsched.seeding import draw_samples, substream
from tmpsched.stats import pearson


def recursion_oracle(model, alphas, bits):
    """Iterate delta_{t-1} = A_t delta_t + (1 - z_t) B_t eps_t from delta_T = 0."""
    T, d = model.T, model.d
    delta = np.zeros(d)
    for t in range(T, 0, -1):
        a_t, a_prev = alphas[T - t], alphas[T - t + 1]
        a = np.sqrt(a_prev / a_t)
        b = np.sqrt(1 - a_prev) - np.sqrt(a_prev) * np.sqrt(1 - a_t) / np.sqrt(a_t)
        delta = a * delta + b * (model.jacobians[t - 1] @ delta)
        if bits[t - 1] == 0:
            delta = delta + b * model.quant_errors[t - 1]
    return delta


@pytest.fixture
def linear():
    T, d = 7, 5
    sched = build_noise_schedule("cosine", T, 0.05, 0.99)
    model = make_denoiser(T, d, gamma=0.0, seed=21, per_step_jacobians=True, error_correlation=0.5)
    return model, sched


class TestClosedForm:
    def test_matches_recursion(self, linear):
        model, sched = linear
        want = recursion_oracle(model, sched.alphas, [0] * model.T)
        np.testing.assert_allclose(closed_form_delta0(model, sched), want, rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("bits", ["1010101", "0000011", "1111110", "0110100"])
    def test_ansatz_matches_recursion(self, linear, bits):
        model, sched = linear
        Z = PrecisionSchedule.from_string(bits)
        want = recursion_oracle(model, sched.alphas, Z.bits)
        np.testing.assert_allclose(ansatz_delta0(model, sched, Z), want, rtol=1e-12, atol=1e-15)

    def test_zero_errors(self, linear):
        model, sched = linear
        quiet = model.with_errors(np.zeros((model.T, model.d)))
        assert np.all(closed_form_delta0(quiet, sched) == 0)

    def test_single_step(self):
        model = make_denoiser(1, 3, seed=2)
        sched = NoiseSchedule([0.3, 0.8])
        b = np.sqrt(0.2) - np.sqrt(0.8 / 0.3) * np.sqrt(0.7)
        np.testing.assert_allclose(closed_form_delta0(model, sched), b * model.quant_errors[0], rtol=1e-14)

    def test_trajectory_difference(self):
        T, d = 3, 4
        model = make_denoiser(T, d, gamma=0.0, seed=5)
        sched = build_noise_schedule("cosine", T, 0.05, 0.99)
        x = draw_samples(5, 1, d)[0]
        diff = (run_trajectory(x, PrecisionSchedule.zeros(T), model, sched).final
                - run_trajectory(x, PrecisionSchedule.ones(T), model, sched).final)
        np.testing.assert_allclose(closed_form_delta0(model, sched), diff, rtol=1e-9)


class TestAnsatz:
    def test_extremes(self, linear):
        model, sched = linear
        T = model.T
        assert np.array_equal(ansatz_delta0(model, sched, PrecisionSchedule.zeros(T)), closed_form_delta0(model, sched))
        assert np.all(ansatz_delta0(model, sched, PrecisionSchedule.ones(T)) == 0)

    def test_single_survivor(self, linear):
        model, sched = linear
        for t in range(1, model.T + 1):
            only_t = PrecisionSchedule.ones(model.T).bits.copy()
            only_t[t - 1] = 0
            np.testing.assert_array_equal(
                ansatz_delta0(model, sched, PrecisionSchedule(only_t)), per_step_contribution(model, sched, t)
            )

    def test_contributions_sum(self, linear):
        model, sched = linear
        total = sum(per_step_contribution(model, sched, t) for t in range(1, model.T + 1))
        np.testing.assert_allclose(total, closed_form_delta0(model, sched), rtol=1e-12)

    def test_first_step_contribution(self, linear):
        model, sched = linear
        b1 = np.sqrt(1 - sched.alpha(0)) - np.sqrt(sched.alpha(0) / sched.alpha(1)) * np.sqrt(1 - sched.alpha(1))
        np.testing.assert_allclose(per_step_contribution(model, sched, 1), b1 * model.quant_errors[0], rtol=1e-13)

    def test_zero_error_step(self, linear):
        model, sched = linear
        errs = model.quant_errors.copy()
        errs[2] = 0.0
        assert np.all(per_step_contribution(model.with_errors(errs), sched, 3) == 0)

    def test_index_errors(self, linear):
        model, sched = linear
        with pytest.raises(IndexError):
            per_step_contribution(model, sched, 0)
        with pytest.raises(ShapeError):
            ansatz_delta0(model, sched, PrecisionSchedule.zeros(3))

    def test_cache_is_per_model(self, linear):
        model, sched = linear
        first = contributions(model, sched)
        doubled = contributions(model.with_errors(2 * model.quant_errors), sched)
        np.testing.assert_allclose(doubled, 2 * first, rtol=1e-13)


class TestMeter:
    def test_reference_zero(self, small_setup):
        model, sched, xs = small_setup
        meter = DeviationMeter(model, sched, xs)
        assert meter.E(PrecisionSchedule.ones(6)) == 0.0
        assert meter.evaluations == 0

    def test_zero_errors_everywhere(self, small_setup):
        model, sched, xs = small_setup
        meter = DeviationMeter(model.with_errors(np.zeros((6, 4))), sched, xs)
        for bits in ("000000", "101010", "011111"):
            assert meter.E(PrecisionSchedule.from_string(bits)) == 0.0

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(0, 1), min_size=6, max_size=6))
    def test_linear_exactness(self, bits):
        sched = build_noise_schedule("cosine", 6, 0.05, 0.999)
        model = make_denoiser(6, 4, gamma=0.0, seed=3)
        Z = PrecisionSchedule(bits)
        rep = DeviationMeter(model, sched, draw_samples(3, 5, 4)).report(Z)
        want = np.linalg.norm(ansatz_delta0(model, sched, Z))
        np.testing.assert_allclose(rep.per_sample_errors, want, rtol=1e-9, atol=1e-15)

    def test_cache_and_count(self, small_setup):
        meter = DeviationMeter(*small_setup)
        Z = PrecisionSchedule.from_string("010101")
        assert meter.report(Z) is meter.report(Z)
        assert meter.evaluations == 1

    def test_empty_samples(self, small_setup):
        model, sched, _ = small_setup
        with pytest.raises(ParameterError):
            DeviationMeter(model, sched, np.empty((0, 4)))
        with pytest.raises(ShapeError):
            DeviationMeter(model, sched, np.zeros((2, 3)))

    def test_wrappers_agree(self, small_setup):
        model, sched, xs = small_setup
        meter = DeviationMeter(model, sched, xs)
        Z = PrecisionSchedule.from_string("110000")
        assert measure_E(Z, model, sched, xs).e_scalar == meter.E(Z)
        assert upcast_gain(2, model, sched, xs) == meter.upcast_gain(2)
        assert downcast_loss(4, model, sched, xs) == meter.downcast_loss(4)


class TestGains:
    def test_error_free_step_has_no_loss(self, small_setup):
        model, sched, xs = small_setup
        errs = model.quant_errors.copy()
        errs[3] = 0.0
        meter = DeviationMeter(model.with_errors(errs), sched, xs)
        assert meter.downcast_loss(4) == 0.0
        assert meter.downcast_loss(2) > 0.0

    def test_single_step_gains_coincide(self):
        model = make_denoiser(1, 3, seed=8, gamma=0.1)
        meter = DeviationMeter(model, NoiseSchedule([0.2, 0.9]), draw_samples(8, 4, 3))
        e0 = meter.E(PrecisionSchedule.zeros(1))
        assert meter.upcast_gain(1) == e0 == meter.downcast_loss(1)

    def test_aligned_contributions_correlate_perfectly(self):
        T, d = 10, 6
        sched = build_noise_schedule("cosine", T, 0.05, 0.99)
        model = make_denoiser(T, d, gamma=0.0, seed=1)
        norms = np.linspace(0.05, 0.5, T) * (1 + 0.3 * np.sin(np.arange(T)))
        aligned = with_aligned_contributions(model, sched, norms, substream(1, "dir").standard_normal(d))
        meter = DeviationMeter(aligned, sched, draw_samples(1, 3, d))
        up = meter.gain_profile("upcast").values
        down = meter.gain_profile("downcast").values
        np.testing.assert_allclose(up, norms, rtol=1e-9)
        np.testing.assert_allclose(down, norms, rtol=1e-9)
        assert pearson(up, down) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_squares_add(self):
        T, d = 6, 8
        sched = build_noise_schedule("cosine", T, 0.05, 0.99)
        model = make_denoiser(T, d, gamma=0.0, seed=2)
        norms = np.array([0.1, 0.4, 0.2, 0.3, 0.05, 0.25])
        orth = with_orthogonal_contributions(model, sched, norms, substream(2, "basis"))
        meter = DeviationMeter(orth, sched, draw_samples(2, 2, d))
        for bits in ("000000", "101000", "011110"):
            Z = PrecisionSchedule.from_string(bits)
            want = np.sqrt(np.sum(norms[Z.bits == 0] ** 2))
            assert meter.E(Z) == pytest.approx(want, rel=1e-9)
        # rank order of the two gain curves agrees exactly
        up = meter.gain_profile("upcast").values
        down = meter.gain_profile("downcast").values
        assert list(np.argsort(up)) == list(np.argsort(down)) == list(np.argsort(norms))

    def test_orthogonal_needs_room(self):
        sched = build_noise_schedule("cosine", 6, 0.05, 0.99)
        with pytest.raises(ParameterError):
            with_orthogonal_contributions(make_denoiser(6, 3, seed=0), sched, np.ones(6), substream(0, "b"))

    def test_profile_csv_round_trip(self, tmp_path):
        prof = GainProfile("upcast", [0.5, 0.1 / 3, -2e-17], ["measured", "interpolated", "measured"])
        prof.to_csv(tmp_path / "g.csv")
        back = GainProfile.from_csv(tmp_path / "g.csv")
        assert back.kind == prof.kind and back.provenance == prof.provenance
        np.testing.assert_array_equal(back.values, prof.values)
        assert back.measured_timesteps() == [1, 3] and not back.fully_measured

    def test_profile_csv_gaps(self, tmp_path):
        (tmp_path / "bad.csv").write_text("t,value,kind,provenance\n1,0.1,upcast,measured\n3,0.2,upcast,measured\n")
        with pytest.raises(ParameterError):
            GainProfile.from_csv(tmp_path / "bad.csv")


class TestScores:
    def test_hand_example(self):
        Z = PrecisionSchedule([1, 0, 1, 0])
        assert gated_score(Z, [5, 1, 3, 2]) == -8.0
        assert score_schedule(Z, GainProfile("upcast", [5, 1, 3, 2])).s_up == -8.0
        assert score_schedule(Z, GainProfile("downcast", [5, 1, 3, 2])).s_down == -8.0

    def test_empty_selection(self):
        assert gated_score(PrecisionSchedule.zeros(4), [5, 1, 3, 2]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            gated_score(PrecisionSchedule.zeros(3), [1, 2])


class TestReport:
    def test_json_round_trip(self, small_setup):
        meter = DeviationMeter(*small_setup)
        rep = meter.report(PrecisionSchedule.from_string("100100"))
        back = DeviationReport.from_json(rep.to_json())
        assert back.schedule == rep.schedule
        np.testing.assert_array_equal(back.per_sample_errors, rep.per_sample_errors)
        assert back.delta0 is None  # raw deviations stay in memory only
        assert back.e_scalar == rep.e_scalar and back.variance == rep.variance

    def test_schema_version_checked(self, small_setup):
        rep = DeviationMeter(*small_setup).report(PrecisionSchedule.zeros(6))
        data = json.loads(rep.to_json())
        data["schema_version"] = 99
        with pytest.raises(ParameterError):
            DeviationReport.from_dict(data)
