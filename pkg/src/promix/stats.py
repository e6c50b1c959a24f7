"""Paired one-sided t-test on a self-contained Student-t CDF.

The CDF evaluates the regularized incomplete beta function with the
standard continued-fraction expansion (Lentz's method), accurate to well
below 1e-10 over the degrees of freedom this library uses. No statistics
dependency; values are cross-checked against reference tables in the
test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

_MAX_ITER = 300
_FPMIN = 1e-300
_EPS = 1e-15


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise RuntimeError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_cdf(t: float, df: float) -> float:
    """P(T <= t) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if t == 0.0:
        return 0.5
    tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
    return 1.0 - tail if t > 0 else tail


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    p_value: float
    n: int

    @property
    def df(self) -> int:
        return self.n - 1


def t_test_paired_one_sided(diffs: Sequence[float]) -> TTestResult:
    """One-sided paired t-test of H1: mean(diffs) > 0.

    t = mean / (sd / sqrt(n)) with the sample standard deviation;
    p = 1 - CDF_t(t, n-1). Requires n >= 2 and positive sample variance.
    """
    diffs = [float(d) for d in diffs]
    n = len(diffs)
    if n < 2:
        raise ValueError("paired t-test needs at least 2 differences")
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    if var <= 0.0:
        raise ValueError("zero variance: t statistic undefined")
    t = mean / math.sqrt(var / n)
    return TTestResult(t, 1.0 - student_t_cdf(t, n - 1), n)
