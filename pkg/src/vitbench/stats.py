"""Classification metrics, confidence intervals, and Welch t-tests.

The Student-t CDF is computed from a hand-rolled regularized incomplete
beta (modified Lentz continued fraction), so every p-value in the result
tables is reproducible from first principles rather than an opaque
library call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .errors import ContractError, InsufficientDataError, NumericError

Z_95 = 1.96  # fixed normal quantile for the reported 95% intervals
ALPHA = 0.05


@dataclass(frozen=True)
class ConfusionMatrix:
    """Binary counts with abnormal (label 1) as the positive class."""

    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricSet:
    """Accuracy, precision, recall, F1 as fractions in [0, 1].

    ``degenerate`` lists the metrics whose denominator was zero and that
    were therefore pinned to the conservative value 0.
    """

    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: tuple[str, ...] = ()

    def as_dict(self) -> dict[str, float]:
        return {"accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1}


@dataclass(frozen=True)
class SummaryCI:
    mean: float
    std: float
    n: int
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class TTestReport:
    mean_a: float
    mean_b: float
    diff: float
    ci_low: float
    ci_high: float
    t_stat: float
    df: float
    p_value: float
    significant: bool
    degenerate: bool = False


def confusion(labels: Sequence[int], predictions: Sequence[int]) -> ConfusionMatrix:
    """Exact binary confusion counts; both sequences over {0, 1}."""
    y = np.asarray(labels)
    p = np.asarray(predictions)
    if y.shape != p.shape or y.ndim != 1:
        raise ContractError(
            f"labels and predictions must be equal-length 1-d, got {y.shape} and {p.shape}"
        )
    if not (np.isin(y, (0, 1)).all() and np.isin(p, (0, 1)).all()):
        raise ContractError("labels and predictions must be 0/1")
    return ConfusionMatrix(
        tp=int(np.sum((y == 1) & (p == 1))),
        tn=int(np.sum((y == 0) & (p == 0))),
        fp=int(np.sum((y == 0) & (p == 1))),
        fn=int(np.sum((y == 1) & (p == 0))),
    )


def metrics(cm: ConfusionMatrix) -> MetricSet:
    """Accuracy, precision, recall, F1 from the counts.

    Zero denominators pin the affected metric to 0 and flag it; a
    screening report should read an undefined precision as "no positive
    calls", not as success.
    """
    if cm.total <= 0:
        raise ContractError("metrics() needs at least one evaluated sample")
    degenerate: list[str] = []
    accuracy = (cm.tp + cm.tn) / cm.total
    if cm.tp + cm.fp > 0:
        precision = cm.tp / (cm.tp + cm.fp)
    else:
        precision = 0.0
        degenerate.append("precision")
    if cm.tp + cm.fn > 0:
        recall = cm.tp / (cm.tp + cm.fn)
    else:
        recall = 0.0
        degenerate.append("recall")
    if precision + recall > 0:
        f1 = 2.0 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        degenerate.append("f1")
    return MetricSet(accuracy=accuracy, precision=precision, recall=recall,
                     f1=f1, degenerate=tuple(degenerate))


def summary_ci(mean: float, std: float, n: int) -> SummaryCI:
    """95% interval x_bar +- 1.96 * s / sqrt(n) from summary numbers."""
    if n < 2:
        raise InsufficientDataError(f"confidence interval needs n >= 2, got {n}")
    if std < 0:
        raise ContractError(f"std must be non-negative, got {std}")
    half = Z_95 * std / math.sqrt(n)
    return SummaryCI(mean=float(mean), std=float(std), n=int(n),
                     ci_low=float(mean - half), ci_high=float(mean + half))


def mean_ci(values: Sequence[float]) -> SummaryCI:
    """Sample mean and 95% interval of raw values (n-1 std)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 2:
        raise InsufficientDataError(f"need a flat list of >= 2 values, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite values in mean_ci input")
    return summary_ci(float(arr.mean()), float(arr.std(ddof=1)), int(arr.size))


# ---------------------------------------------------------------------------
# Student-t numerics


_BETACF_MAX_ITER = 300
_BETACF_EPS = 1e-15
_BETACF_TINY = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _BETACF_TINY:
        d = _BETACF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _BETACF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETACF_TINY:
            d = _BETACF_TINY
        c = 1.0 + aa / c
        if abs(c) < _BETACF_TINY:
            c = _BETACF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETACF_TINY:
            d = _BETACF_TINY
        c = 1.0 + aa / c
        if abs(c) < _BETACF_TINY:
            c = _BETACF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETACF_EPS:
            return h
    raise NumericError(f"incomplete beta continued fraction stalled at a={a}, b={b}, x={x}")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) for a, b > 0, x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise ContractError("betainc_reg needs positive shape parameters")
    if not 0.0 <= x <= 1.0:
        raise ContractError(f"x must be in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (gammaln(a + b) - gammaln(a) - gammaln(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    # use whichever tail converges fast
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_cdf(t: float, df: float) -> float:
    """Student-t CDF P(T <= t) with df degrees of freedom."""
    if df <= 0:
        raise ContractError(f"degrees of freedom must be positive, got {df}")
    if t == 0.0:
        return 0.5
    x = df / (df + t * t)
    tail = 0.5 * betainc_reg(0.5 * df, 0.5, x)
    return 1.0 - tail if t > 0 else tail


def t_critical(df: float, alpha: float = ALPHA) -> float:
    """Two-sided critical value: t with t_cdf(t, df) = 1 - alpha/2.

    Found by bisection on the CDF, so it inherits the CDF's accuracy and
    adds no new numerics.
    """
    if not 0.0 < alpha < 1.0:
        raise ContractError(f"alpha must be in (0, 1), got {alpha}")
    target = 1.0 - alpha / 2.0
    lo, hi = 0.0, 1.0
    while t_cdf(hi, df) < target:
        hi *= 2.0
        if hi > 1e12:
            raise NumericError(f"no critical value below 1e12 for df={df}, alpha={alpha}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t_cdf(mid, df) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def _as_summary(sample) -> tuple[float, float, int]:
    """Accept a raw vector or a (mean, std, n) triple."""
    if isinstance(sample, tuple) and len(sample) == 3:
        mean, std, n = sample
        n = int(n)
        if n < 2:
            raise InsufficientDataError(f"t-test needs n >= 2 per sample, got {n}")
        if std < 0:
            raise ContractError(f"std must be non-negative, got {std}")
        return float(mean), float(std), n
    arr = np.asarray(sample, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 2:
        raise InsufficientDataError("t-test samples need >= 2 raw values")
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite values in t-test sample")
    return float(arr.mean()), float(arr.std(ddof=1)), int(arr.size)


def welch_test(a, b, alpha: float = ALPHA, paired: bool = False) -> TTestReport:
    """Two-sided two-sample t-test of mean difference a - b.

    Default is Welch (unequal variances, Welch-Satterthwaite df), taking
    raw vectors or (mean, std, n) summaries interchangeably. ``paired``
    switches to the paired test on element-wise differences, which only
    raw equal-length vectors support.

    Zero variance in both samples is reported, not raised: equal means
    give t = 0, p = 1; unequal means give p = 0 with ``degenerate`` set.
    """
    if paired:
        return _paired_test(a, b, alpha)
    mean_a, std_a, n_a = _as_summary(a)
    mean_b, std_b, n_b = _as_summary(b)
    diff = mean_a - mean_b
    va, vb = std_a ** 2 / n_a, std_b ** 2 / n_b
    se = math.sqrt(va + vb)
    if se == 0.0:
        return _degenerate_report(mean_a, mean_b, df=float(n_a + n_b - 2), alpha=alpha)
    t_stat = diff / se
    # the df formula is scale-free in (va, vb); normalizing by the larger
    # one keeps the squares from underflowing to 0/0 for tiny variances
    m = max(va, vb)
    ra, rb = va / m, vb / m
    df = (ra + rb) ** 2 / (ra ** 2 / (n_a - 1) + rb ** 2 / (n_b - 1))
    return _finish_test(mean_a, mean_b, t_stat, df, se, alpha)


def _paired_test(a, b, alpha: float) -> TTestReport:
    # a 3-tuple would silently parse as three raw values, so refuse the
    # summary-triple convention here outright
    if isinstance(a, tuple) or isinstance(b, tuple):
        raise ContractError("paired test needs raw vectors, not (mean, std, n) summaries")
    arr_a = np.asarray(a, dtype=np.float64)
    arr_b = np.asarray(b, dtype=np.float64)
    if arr_a.ndim != 1 or arr_a.shape != arr_b.shape:
        raise ContractError("paired test needs equal-length raw vectors")
    if arr_a.size < 2:
        raise InsufficientDataError("paired test needs >= 2 pairs")
    d = arr_a - arr_b
    n = d.size
    sd = float(d.std(ddof=1))
    se = sd / math.sqrt(n)
    mean_a, mean_b = float(arr_a.mean()), float(arr_b.mean())
    if se == 0.0:
        return _degenerate_report(mean_a, mean_b, df=float(n - 1), alpha=alpha)
    return _finish_test(mean_a, mean_b, float(d.mean()) / se, float(n - 1), se, alpha)


def _finish_test(mean_a, mean_b, t_stat, df, se, alpha) -> TTestReport:
    p = 2.0 * (1.0 - t_cdf(abs(t_stat), df))
    p = min(max(p, 0.0), 1.0)
    half = t_critical(df, alpha) * se
    diff = mean_a - mean_b
    return TTestReport(mean_a=mean_a, mean_b=mean_b, diff=diff,
                       ci_low=diff - half, ci_high=diff + half,
                       t_stat=t_stat, df=df, p_value=p,
                       significant=p < alpha)


def _degenerate_report(mean_a, mean_b, df, alpha) -> TTestReport:
    diff = mean_a - mean_b
    if diff == 0.0:
        return TTestReport(mean_a=mean_a, mean_b=mean_b, diff=0.0,
                           ci_low=0.0, ci_high=0.0, t_stat=0.0, df=df,
                           p_value=1.0, significant=False)
    return TTestReport(mean_a=mean_a, mean_b=mean_b, diff=diff,
                       ci_low=diff, ci_high=diff,
                       t_stat=math.copysign(math.inf, diff), df=df,
                       p_value=0.0, significant=True, degenerate=True)


def pairwise_table(
    configs: Sequence[tuple[str, dict[str, Sequence[float]]]],
    alpha: float = ALPHA,
) -> dict[str, list[tuple[str, str, TTestReport]]]:
    """Welch tests for every unordered config pair, one table per metric.

    ``configs`` is a list of (name, {metric: per-replication values}).
    Pair order follows input order: (0,1), (0,2), ..., so rows are stable
    across runs. Unequal replication counts are fine.
    """
    if len(configs) < 2:
        raise ContractError("pairwise_table needs at least two configs")
    key_sets = [frozenset(vectors.keys()) for _, vectors in configs]
    if len(set(key_sets)) != 1:
        raise ContractError("all configs must report the same metric keys")
    metric_names = sorted(key_sets[0])
    tables: dict[str, list[tuple[str, str, TTestReport]]] = {m: [] for m in metric_names}
    for i, (name_a, vec_a) in enumerate(configs):
        for name_b, vec_b in configs[i + 1:]:
            for m in metric_names:
                tables[m].append((name_a, name_b,
                                  welch_test(vec_a[m], vec_b[m], alpha=alpha)))
    return tables
