"""Paired t-tests with confidence intervals and paired effect sizes."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import special

CSV_COLUMNS = ["comparison", "t", "p", "mean_diff", "ci_low", "ci_high", "cohens_d", "n", "status"]


class StatsError(ValueError):
    pass


class DegenerateStatisticsError(StatsError):
    """The paired differences have zero spread, so t and d are undefined."""


def _check_df(df) -> float:
    if not df > 0:
        raise StatsError(f"degrees of freedom must be positive, got {df}")
    return float(df)


def student_t_cdf(t: float, df) -> float:
    """P(T <= t) for Student's t with ``df`` degrees of freedom.

    Uses P(|T| > |t|) = I_x(df/2, 1/2) with x = df / (df + t^2).
    """
    df = _check_df(df)
    if math.isnan(t):
        raise StatsError("t is NaN")
    if math.isinf(t):
        return 1.0 if t > 0 else 0.0
    tail = 0.5 * _two_tail(t, df)
    return 1.0 - tail if t >= 0 else tail


def _two_tail(t: float, df: float) -> float:
    t2 = t * t
    if t2 > df:
        return float(special.betainc(df / 2.0, 0.5, df / (df + t2)))
    # near zero x rounds to 1, so go through the complement, whose argument is exact
    return 1.0 - float(special.betainc(0.5, df / 2.0, t2 / (df + t2)))


def student_t_ppf(q: float, df) -> float:
    """Inverse of :func:`student_t_cdf` for ``0 < q < 1``."""
    df = _check_df(df)
    if not 0.0 < q < 1.0:
        raise StatsError(f"quantile must lie in (0, 1), got {q}")
    if q == 0.5:
        return 0.0
    tail = min(q, 1.0 - q)
    x = float(special.betaincinv(df / 2.0, 0.5, 2.0 * tail))
    t = math.sqrt(df * (1.0 - x) / x)
    return t if q > 0.5 else -t


def two_sided_p(t: float, df) -> float:
    df = _check_df(df)
    return _two_tail(t, df) if math.isfinite(t) else 0.0


@dataclass(frozen=True)
class PairedTestResult:
    t_statistic: float
    p_value: float
    mean_difference: float
    ci95: tuple
    cohens_d: float
    n: int

    def csv_row(self, comparison: str) -> list:
        return [comparison, repr(self.t_statistic), repr(self.p_value), repr(self.mean_difference),
                repr(self.ci95[0]), repr(self.ci95[1]), repr(self.cohens_d), self.n, "ok"]


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> PairedTestResult:
    """Two-sided paired t-test of ``a - b`` with a 95% interval and d = mean/sd."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise StatsError(f"paired samples differ in length: {a.size} vs {b.size}")
    n = a.size
    if n < 2:
        raise StatsError(f"a paired t-test needs at least 2 pairs, got {n}")
    d = a - b
    if not np.all(np.isfinite(d)):
        raise StatsError("paired differences contain non-finite values")
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    # differences that agree to rounding error count as zero spread
    if sd <= 1e-12 * max(1.0, float(np.abs(d).max())):
        raise DegenerateStatisticsError("paired differences have zero variance")
    se = sd / math.sqrt(n)
    t = mean / se
    half = student_t_ppf(0.975, n - 1) * se
    return PairedTestResult(t, two_sided_p(t, n - 1), mean, (mean - half, mean + half),
                            mean / sd, n)


def ttest_table(rows: Iterable[tuple]):
    """CSV of ``(comparison, a, b)`` tests and the labels of degenerate comparisons.

    A degenerate pair gets a ``degenerate`` status row instead of numbers.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    degenerate = []
    for comparison, a, b in rows:
        try:
            w.writerow(paired_ttest(a, b).csv_row(comparison))
        except DegenerateStatisticsError:
            degenerate.append(comparison)
            w.writerow([comparison, "", "", "", "", "", "", len(a), "degenerate"])
    return buf.getvalue(), degenerate
