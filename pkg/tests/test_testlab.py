from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eqcov.conformal import CalibrationSpec, Learner, fit_base_models
from eqcov.data import SYNTHETIC_PRESETS, generate_synthetic, split_train_calibration
from eqcov.exceptions import ConfigError
from eqcov.testlab import (
    CoverageEstimate,
    exact_rank_coverage,
    finite_difference_gradient,
    monte_carlo_coverage,
    monte_carlo_group_coverage,
    normal_scores,
    permutation_rank_coverage,
    tied_scores,
)


class TestExactRank:
    @pytest.mark.parametrize("m, alpha, expected", [
        (9, 0.5, Fraction(1, 2)),
        (4, 0.1, Fraction(1)),
        (19, 0.1, Fraction(9, 10)),
    ])
    def test_examples(self, m, alpha, expected):
        assert exact_rank_coverage(m, alpha) == expected

    @pytest.mark.parametrize("m", range(1, 7))
    @pytest.mark.parametrize("alpha", [Fraction(1, 10), Fraction(1, 4), Fraction(1, 3), Fraction(1, 2), Fraction(4, 5)])
    def test_matches_permutation_enumeration(self, m, alpha):
        assert permutation_rank_coverage(m, alpha) == exact_rank_coverage(m, alpha)

    @given(st.integers(1, 2000), st.fractions(Fraction(1, 100), Fraction(99, 100)))
    def test_sandwich(self, m, alpha):
        c = exact_rank_coverage(m, alpha)
        assert 1 - alpha <= c <= 1 - alpha + Fraction(1, m + 1)
        assert (c == 1) == (m < (1 - alpha) / alpha)

    def test_not_monotone_in_m(self):
        # the coverage saw-tooths down toward 1 - alpha, not monotonically
        assert exact_rank_coverage(9, 0.1) == Fraction(9, 10)
        assert exact_rank_coverage(10, 0.1) == Fraction(10, 11)

    def test_errors(self):
        with pytest.raises(ConfigError):
            exact_rank_coverage(5, 1.0)
        with pytest.raises(ConfigError):
            exact_rank_coverage(0, 0.1)


class TestMonteCarlo:
    def test_continuous_scores(self):
        est = monte_carlo_coverage(normal_scores, m=19, alpha=0.1, trials=100_000, seed=0)
        assert est.within(float(exact_rank_coverage(19, 0.1)))

    def test_tied_scores(self):
        est = monte_carlo_coverage(tied_scores, m=19, alpha=0.1, trials=1000, seed=0)
        assert est.estimate == 1.0

    def test_deterministic(self):
        a = monte_carlo_coverage(m=7, alpha=0.2, trials=5000, seed=4, batch=333)
        b = monte_carlo_coverage(m=7, alpha=0.2, trials=5000, seed=4, batch=5000)
        assert a == b

    def test_unbounded_regime(self):
        est = monte_carlo_coverage(m=4, alpha=0.1, trials=2000, seed=1)
        assert est.estimate == 1.0

    def test_estimate_arithmetic(self):
        e = CoverageEstimate(100, 90)
        assert e.estimate == 0.9 and e.se == pytest.approx(0.03)
        assert e.within(0.95) and not e.within(1.0)
        assert "90/100" in str(e)

    def test_trials_positive(self):
        with pytest.raises(ConfigError):
            monte_carlo_coverage(trials=0)


@pytest.fixture(scope="module")
def two_group_models():
    data = generate_synthetic(SYNTHETIC_PRESETS["two-group"], seed=0)
    split = split_train_calibration(data, 0.5, seed=0)
    spec_j = CalibrationSpec(symmetric=True)
    spec_g = CalibrationSpec(symmetric=True, mode="groupwise")
    learner = Learner("linear")
    return {
        "joint": fit_base_models(data, split.proper_train, spec_j, learner),
        "groupwise": fit_base_models(data, split.proper_train, spec_g, learner),
    }


class TestGroupCoverage:
    @pytest.mark.parametrize("mode", ["joint", "groupwise"])
    def test_each_group_inside_band(self, two_group_models, mode):
        m, alpha = 30, 0.1
        spec = CalibrationSpec(symmetric=True, mode=mode, alpha=alpha)
        res = monte_carlo_group_coverage(
            two_group_models[mode], spec, SYNTHETIC_PRESETS["two-group"], m, trials=20_000, seed=1
        )
        for tc in res.values():
            assert tc.coverage.within(1 - alpha, 1 - alpha + 1 / (m + 1))

    def test_tails_are_controlled(self, two_group_models):
        spec = CalibrationSpec(alpha=0.1, alpha_lo=0.03, alpha_hi=0.07)
        res = monte_carlo_group_coverage(
            two_group_models["joint"], spec, SYNTHETIC_PRESETS["two-group"], {0: 40, 1: 25}, trials=20_000, seed=2
        )
        for tc in res.values():
            assert tc.lower_miss.estimate <= 0.03 + 3 * tc.lower_miss.se
            assert tc.upper_miss.estimate <= 0.07 + 3 * tc.upper_miss.se
            assert tc.coverage.hits + tc.lower_miss.hits + tc.upper_miss.hits == tc.coverage.trials
        assert res[1].m == 25

    def test_marginal_rejected(self, two_group_models):
        with pytest.raises(ConfigError):
            monte_carlo_group_coverage(
                two_group_models["joint"], CalibrationSpec(coverage="marginal"),
                SYNTHETIC_PRESETS["two-group"], 10, trials=10,
            )


class TestFiniteDifferences:
    def test_quadratic(self):
        g = finite_difference_gradient(lambda t: float(t @ t), np.array([1.0, 2.0]))
        np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-6)

    def test_linear(self):
        c = np.array([0.5, -3.0, 2.0])
        g = finite_difference_gradient(lambda t: float(c @ t), np.array([7.0, 1.0, -4.0]))
        np.testing.assert_allclose(g, c, atol=1e-8)

    def test_does_not_mutate_input(self):
        theta = np.array([1.0, 2.0])
        finite_difference_gradient(lambda t: float(t.sum()), theta)
        np.testing.assert_array_equal(theta, [1.0, 2.0])

    def test_errors(self):
        with pytest.raises(ConfigError):
            finite_difference_gradient(lambda t: 0.0, np.zeros(2), eps=0)
        with pytest.raises(FloatingPointError):
            finite_difference_gradient(lambda t: float("inf"), np.zeros(2))
