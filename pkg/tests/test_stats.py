import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from tmpsched.exceptions import ParameterError, UndefinedCorrelationError
from tmpsched.stats import (
    CorrelationSummary,
    average_ranks,
    concordance_probability,
    correlate,
    kendall_tau_b,
    pearson,
    spearman,
    summaries_to_csv,
)


def pair_counts(xs, ys):
    conc = disc = 0
    for i, j in itertools.combinations(range(len(xs)), 2):
        s = (xs[i] - xs[j]) * (ys[i] - ys[j])
        conc += s > 0
        disc += s < 0
    return conc, disc


def test_perfect_linear():
    xs = [0.5, 1.0, 2.0, 7.0, 3.5]
    s = correlate(xs, [2 * x + 1 for x in xs])
    assert s.pearson_r == pytest.approx(1.0) and s.r_squared == pytest.approx(1.0)
    assert s.spearman_rho == 1.0 and s.kendall_tau == 1.0 and s.concordance_p == 1.0


def test_reversed():
    xs = [1, 2, 3, 4, 5]
    s = correlate(xs, [10, 8, 5, 1, -3])
    assert s.spearman_rho == -1.0 and s.kendall_tau == -1.0 and s.concordance_p == 0.0


def test_hand_counted_tau():
    # index pairs (0,1)+ (0,2)+ (0,3)+ (1,2)- (1,3)+ (2,3)+ -> five concordant, one discordant
    xs, ys = [1, 2, 3, 4], [1, 3, 2, 4]
    conc, disc = pair_counts(xs, ys)
    assert (conc, disc) == (5, 1)
    assert kendall_tau_b(xs, ys) == pytest.approx((5 - 1) / 6)


def test_concordance_probability():
    assert concordance_probability(0.88) == 0.94
    assert concordance_probability(-1.0) == 0.0 and concordance_probability(1.0) == 1.0


def test_average_ranks_with_ties():
    np.testing.assert_array_equal(average_ranks([10, 20, 20, 5, 20]), [2, 4, 4, 1, 4])


@pytest.mark.parametrize("n", [3, 4, 5, 6])
def test_tau_b_against_scipy_on_permutations(n):
    base = list(range(n))
    for perm in itertools.permutations(base):
        for ys in (list(perm), [p // 2 for p in perm]):
            got = kendall_tau_b(base, ys)
            assert got == pytest.approx(sps.kendalltau(base, ys).statistic, abs=1e-12)
            if len(set(ys)) == n:
                conc, disc = pair_counts(base, ys)
                assert got == pytest.approx((conc - disc) / math.comb(n, 2), abs=1e-12)


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(finite, finite), min_size=3, max_size=25))
def test_matches_scipy(pairs):
    xs, ys = map(list, zip(*pairs))
    assume(len(set(xs)) > 1 and len(set(ys)) > 1)
    assume(np.std(xs) > 1e-6 and np.std(ys) > 1e-6)
    s = correlate(xs, ys)
    assert s.spearman_rho == pytest.approx(sps.spearmanr(xs, ys).statistic, abs=1e-9)
    assert s.kendall_tau == pytest.approx(sps.kendalltau(xs, ys).statistic, abs=1e-9)
    assert s.pearson_r == pytest.approx(sps.pearsonr(xs, ys).statistic, abs=1e-7)
    assert s.concordance_p == (s.kendall_tau + 1) / 2


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(-20, 20), st.integers(-20, 20)), min_size=3, max_size=20),
       st.floats(0.1, 50), st.floats(-100, 100))
def test_invariances(pairs, scale, shift):
    xs, ys = map(list, zip(*pairs))
    assume(len(set(xs)) > 1 and len(set(ys)) > 1)
    base = correlate(xs, ys)
    moved = correlate([scale * x + shift for x in xs], ys)
    assert moved.spearman_rho == pytest.approx(base.spearman_rho, abs=1e-12)
    assert moved.kendall_tau == pytest.approx(base.kendall_tau, abs=1e-12)
    assert moved.pearson_r == pytest.approx(base.pearson_r, abs=1e-9)
    swapped = correlate(ys, xs)
    assert swapped.kendall_tau == pytest.approx(base.kendall_tau, abs=1e-12)
    assert swapped.spearman_rho == pytest.approx(base.spearman_rho, abs=1e-12)
    assert -1.0 <= base.kendall_tau <= 1.0 and -1.0 <= base.spearman_rho <= 1.0


def test_errors():
    with pytest.raises(UndefinedCorrelationError):
        correlate([1, 1, 1], [1, 2, 3])
    with pytest.raises(UndefinedCorrelationError):
        spearman([1, 2, 3], [4, 4, 4])
    with pytest.raises(ParameterError):
        pearson([1, 2, 3], [1, 2])
    with pytest.raises(ParameterError):
        kendall_tau_b([1, 2], [2, 1])
    with pytest.raises(ParameterError):
        correlate([1, 2, float("nan")], [1, 2, 3])


def test_serialisation():
    s = correlate([1, 2, 3, 4, 6], [2, 1, 4, 3, 5])
    assert CorrelationSummary.from_dict(s.to_dict()) == s
    text = summaries_to_csv([s.csv_row(K=2, predictor="s_up")], ["K", "predictor"])
    header, row = text.strip().split("\n")
    assert header.startswith("K,predictor,pearson_r")
    assert CorrelationSummary.from_dict(dict(zip(header.split(","), row.split(",")))) == s
