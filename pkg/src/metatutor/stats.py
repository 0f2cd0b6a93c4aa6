"""Learning-gain and significance statistics used in the result tables.

p-values come from the regularized incomplete beta and gamma functions below,
evaluated with the usual series / modified-Lentz continued fraction split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

_EPS = 1e-15
_TINY = 1e-300
_MAX_ITER = 10_000


# --- special functions ----------------------------------------------------------------


def _beta_cf(a: float, b: float, x: float) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _TINY else _TINY)
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def reg_inc_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError(f"reg_inc_beta needs a, b > 0 (got a={a}, b={b})")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"reg_inc_beta needs 0 <= x <= 1 (got {x})")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    # the continued fraction converges fast only below the mean; use symmetry above it
    if x < (a + 1.0) / (a + b + 2.0):
        value = front * _beta_cf(a, b, x) / a
    else:
        value = 1.0 - front * _beta_cf(b, a, 1.0 - x) / b
    return min(1.0, max(0.0, value))


def _gamma_series(s: float, x: float) -> float:
    term = 1.0 / s
    total = term
    ap = s
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            return total * math.exp(-x + s * math.log(x) - math.lgamma(s))
    raise ArithmeticError(f"incomplete gamma series did not converge (s={s}, x={x})")


def _gamma_cf(s: float, x: float) -> float:
    b = x + 1.0 - s
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER + 1):
        an = -i * (i - s)
        b += 2.0
        d = an * d + b
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = b + an / c
        c = c if abs(c) > _TINY else _TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return math.exp(-x + s * math.log(x) - math.lgamma(s)) * h
    raise ArithmeticError(f"incomplete gamma continued fraction did not converge (s={s}, x={x})")


def reg_inc_gamma_upper(s: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(s, x)."""
    if s <= 0:
        raise ValueError(f"reg_inc_gamma_upper needs s > 0 (got {s})")
    if x < 0:
        raise ValueError(f"reg_inc_gamma_upper needs x >= 0 (got {x})")
    if x == 0.0:
        return 1.0
    if math.isinf(x):
        return 0.0
    if x < s + 1.0:
        return min(1.0, max(0.0, 1.0 - _gamma_series(s, x)))
    return min(1.0, max(0.0, _gamma_cf(s, x)))


def t_sf_two_sided(t: float, df: float) -> float:
    if math.isinf(t):
        return 0.0
    return reg_inc_beta(df / 2.0, 0.5, df / (df + t * t))


def f_sf(f: float, df1: float, df2: float) -> float:
    if f <= 0:
        return 1.0
    if math.isinf(f):
        return 0.0
    return reg_inc_beta(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f))


def chi2_sf(x: float, df: float) -> float:
    return reg_inc_gamma_upper(df / 2.0, x / 2.0)


# --- descriptive -----------------------------------------------------------------------


@dataclass(frozen=True)
class SampleSet:
    values: tuple[float, ...]
    label: str = ""

    def __init__(self, values: Sequence[float], label: str = ""):
        object.__setattr__(self, "values", tuple(float(v) for v in values))
        object.__setattr__(self, "label", label)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class Summary:
    mean: float
    sd: float
    n: int


def mean(values: Sequence[float]) -> float:
    if len(values) == 0:
        raise ValueError("mean of an empty sample")
    return math.fsum(values) / len(values)


def sd(values: Sequence[float]) -> float:
    """Sample standard deviation (n - 1 denominator)."""
    n = len(values)
    if n < 2:
        raise ValueError("standard deviation needs at least 2 values")
    m = mean(values)
    return math.sqrt(math.fsum((v - m) ** 2 for v in values) / (n - 1))


def describe(sample: SampleSet | Sequence[float]) -> Summary:
    """Mean, sd and n; sd is NaN for a single value (use :func:`sd` to get the error)."""
    values = sample.values if isinstance(sample, SampleSet) else tuple(sample)
    m = mean(values)
    return Summary(m, sd(values) if len(values) >= 2 else math.nan, len(values))


def nlg(pre: float, post: float, max_score: float = 100.0) -> float:
    """Normalized learning gain (post - pre) / sqrt(max - pre)."""
    if pre >= max_score:
        raise ZeroDivisionError(f"NLG undefined when pre ({pre}) reaches the maximum ({max_score})")
    if pre < 0 or not 0 <= post <= max_score:
        raise ValueError(f"scores out of range: pre={pre}, post={post}, max={max_score}")
    return (post - pre) / math.sqrt(max_score - pre)


def bonferroni(alpha: float, m: int) -> float:
    if not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    if m < 1:
        raise ValueError("number of comparisons must be >= 1")
    return alpha / m


# --- inferential -----------------------------------------------------------------------


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: float
    p: float
    d: float
    capped: bool = False


@dataclass(frozen=True)
class AnovaResult:
    F: float
    df_between: int
    df_within: int
    p: float
    degenerate: bool = False


@dataclass(frozen=True)
class ChiSquareResult:
    chi2: float
    df: int
    p: float
    n: int


def _as_summary(x: SampleSet | Summary | Sequence[float]) -> Summary:
    if isinstance(x, Summary):
        return x
    return describe(x)


def t_test_ind(a, b, equal_var: bool = True) -> TTestResult:
    """Independent-samples t-test with Cohen's d on the pooled SD.

    ``a`` and ``b`` are samples or :class:`Summary` values. With zero
    pooled variance and unequal means t is infinite and ``capped`` is set.
    """
    sa, sb = _as_summary(a), _as_summary(b)
    if sa.n < 2 or sb.n < 2:
        raise ValueError("each group needs at least 2 observations")
    if sa.sd < 0 or sb.sd < 0:
        raise ValueError("standard deviations must be non-negative")
    va, vb = sa.sd ** 2, sb.sd ** 2
    pooled_var = ((sa.n - 1) * va + (sb.n - 1) * vb) / (sa.n + sb.n - 2)
    diff = sa.mean - sb.mean
    if equal_var:
        df = float(sa.n + sb.n - 2)
        se = math.sqrt(pooled_var * (1.0 / sa.n + 1.0 / sb.n))
    else:
        qa, qb = va / sa.n, vb / sb.n
        se = math.sqrt(qa + qb)
        df = (qa + qb) ** 2 / (qa ** 2 / (sa.n - 1) + qb ** 2 / (sb.n - 1)) if se > 0 else float(sa.n + sb.n - 2)
    if se == 0.0:
        if diff == 0.0:
            return TTestResult(0.0, df, 1.0, 0.0)
        inf = math.copysign(math.inf, diff)
        return TTestResult(inf, df, 0.0, inf, capped=True)
    t = diff / se
    d = diff / math.sqrt(pooled_var)
    return TTestResult(t, df, t_sf_two_sided(t, df), d)


def cohens_d(a, b) -> float:
    return t_test_ind(a, b).d


def one_way_anova(groups: Sequence[SampleSet | Sequence[float]]) -> AnovaResult:
    """One-way ANOVA. All-constant identical groups give F = 0, p = 1 by convention;
    zero within-group variance with differing means gives F = inf, p = 0."""
    samples = [g.values if isinstance(g, SampleSet) else tuple(float(v) for v in g) for g in groups]
    if len(samples) < 2:
        raise ValueError("ANOVA needs at least 2 groups")
    if any(len(s) < 2 for s in samples):
        raise ValueError("each ANOVA group needs at least 2 observations")
    k = len(samples)
    n = sum(len(s) for s in samples)
    grand = math.fsum(v for s in samples for v in s) / n
    means = [mean(s) for s in samples]
    ss_between = math.fsum(len(s) * (m - grand) ** 2 for s, m in zip(samples, means))
    ss_within = math.fsum((v - m) ** 2 for s, m in zip(samples, means) for v in s)
    df1, df2 = k - 1, n - k
    if ss_within == 0.0:
        if ss_between == 0.0:
            return AnovaResult(0.0, df1, df2, 1.0, degenerate=True)
        return AnovaResult(math.inf, df1, df2, 0.0, degenerate=True)
    F = (ss_between / df1) / (ss_within / df2)
    return AnovaResult(F, df1, df2, f_sf(F, df1, df2))


def chi_square_independence(table: Sequence[Sequence[float]]) -> ChiSquareResult:
    obs = np.asarray(table, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[0] < 2 or obs.shape[1] < 2:
        raise ValueError("contingency table must be at least 2x2")
    if (obs < 0).any():
        raise ValueError("counts must be non-negative")
    rows, cols = obs.sum(axis=1), obs.sum(axis=0)
    if (rows == 0).any() or (cols == 0).any():
        raise ValueError("contingency table has a zero marginal")
    total = obs.sum()
    expected = np.outer(rows, cols) / total
    chi2 = float(((obs - expected) ** 2 / expected).sum())
    df = (obs.shape[0] - 1) * (obs.shape[1] - 1)
    return ChiSquareResult(chi2, df, chi2_sf(chi2, df), int(round(total)))
