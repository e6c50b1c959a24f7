"""Student-t CDF via the incomplete beta function, and the paired test.

Reference values come from standard t tables and a high-precision
mpmath oracle (test-only dependency).
"""

import math

import mpmath
import numpy as np
import pytest

from promix.stats import (
    regularized_incomplete_beta,
    student_t_cdf,
    t_test_paired_one_sided,
)


class TestIncompleteBeta:
    def test_endpoints(self):
        assert regularized_incomplete_beta(2.0, 3.0, 0.0) == 0.0
        assert regularized_incomplete_beta(2.0, 3.0, 1.0) == 1.0

    def test_symmetry_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a, b = rng.uniform(0.5, 20, 2)
            x = rng.uniform(0, 1)
            lhs = regularized_incomplete_beta(a, b, x)
            rhs = 1.0 - regularized_incomplete_beta(b, a, 1.0 - x)
            assert lhs == pytest.approx(rhs, abs=1e-12)

    def test_against_high_precision_oracle(self):
        mpmath.mp.dps = 40
        rng = np.random.default_rng(1)
        for _ in range(100):
            a, b = rng.uniform(0.5, 30, 2)
            x = rng.uniform(0.001, 0.999)
            ours = regularized_incomplete_beta(a, b, x)
            exact = float(mpmath.betainc(a, b, 0, x, regularized=True))
            assert ours == pytest.approx(exact, abs=1e-10)

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            regularized_incomplete_beta(-1.0, 2.0, 0.5)
        with pytest.raises(ValueError):
            regularized_incomplete_beta(1.0, 2.0, 1.5)


class TestStudentTCDF:
    def test_zero_is_exactly_half(self):
        for df in (1, 2, 9, 30):
            assert student_t_cdf(0.0, df) == 0.5

    def test_table_value_df9(self):
        # one-sided critical value: P(T > 3.250) = 0.005 at 9 dof
        p = 1.0 - student_t_cdf(3.25, 9)
        assert p == pytest.approx(0.005, abs=5e-4)

    def test_more_table_values(self):
        # (t, df, upper-tail p) from standard tables
        for t, df, upper in [(1.833, 9, 0.05), (2.262, 9, 0.025), (6.314, 1, 0.05),
                             (2.086, 20, 0.025), (1.282, 1000, 0.10)]:
            assert 1.0 - student_t_cdf(t, df) == pytest.approx(upper, abs=5e-4)

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            t = rng.uniform(-5, 5)
            df = int(rng.integers(1, 40))
            assert student_t_cdf(t, df) + student_t_cdf(-t, df) == pytest.approx(1.0, abs=1e-12)

    def test_monotone_in_t(self):
        ts = np.linspace(-6, 6, 101)
        values = [student_t_cdf(t, 7) for t in ts]
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_approaches_gaussian_for_large_df(self):
        from math import erf, sqrt

        for t in (-2.0, -0.5, 0.7, 1.9):
            gauss = 0.5 * (1 + erf(t / sqrt(2)))
            assert student_t_cdf(t, 100000) == pytest.approx(gauss, abs=1e-4)


class TestPairedTTest:
    def test_zero_variance_rejected(self):
        with pytest.raises(ValueError, match="variance"):
            t_test_paired_one_sided([1.0, 1.0, 1.0])

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            t_test_paired_one_sided([1.0])

    def test_zero_mean_gives_half(self):
        result = t_test_paired_one_sided([-1.0, 1.0, -2.0, 2.0])
        assert result.t_statistic == pytest.approx(0.0, abs=1e-15)
        assert result.p_value == pytest.approx(0.5, abs=1e-12)

    def test_statistic_formula(self):
        diffs = [0.3, 0.5, 0.1, 0.9, 0.2]
        result = t_test_paired_one_sided(diffs)
        mean = np.mean(diffs)
        sd = np.std(diffs, ddof=1)
        assert result.t_statistic == pytest.approx(mean / (sd / math.sqrt(5)), rel=1e-12)
        assert result.df == 4

    def test_p_decreases_in_t(self):
        base = [1.0, 1.2, 0.8, 1.1, 0.9]
        ps = [
            t_test_paired_one_sided([d + shift for d in base]).p_value
            for shift in (0.0, 0.5, 1.0, 2.0)
        ]
        assert all(b < a for a, b in zip(ps, ps[1:]))

    def test_consistent_positive_gaps_are_significant(self):
        rng = np.random.default_rng(3)
        gaps = rng.normal(1.0, 0.2, 10)
        assert t_test_paired_one_sided(gaps).p_value < 1e-4
