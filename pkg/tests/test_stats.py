"""Confusion metrics, t distribution numerics, Welch tests, and interval
summaries.  Reference values come from closed forms, brute-force counting,
and adaptive quadrature of the t density, never from the code under test."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitbench.errors import ContractError, InsufficientDataError, NumericError
from vitbench.stats import (
    ConfusionMatrix,
    betainc_reg,
    confusion,
    mean_ci,
    metrics,
    pairwise_table,
    summary_ci,
    t_cdf,
    t_critical,
    welch_test,
)


def t_density(x: float, df: float) -> float:
    lognorm = (math.lgamma((df + 1) / 2) - math.lgamma(df / 2)
               - 0.5 * math.log(df * math.pi))
    return math.exp(lognorm - (df + 1) / 2 * math.log1p(x * x / df))


def t_cdf_quadrature(t: float, df: float) -> float:
    """Adaptive Simpson integration of the density; independent oracle."""

    def simpson(f, a, b, fa, fm, fb, whole, depth):
        m = (a + b) / 2
        lm, rm = (a + m) / 2, (m + b) / 2
        flm, frm = f(lm), f(rm)
        left = (m - a) / 6 * (fa + 4 * flm + fm)
        right = (b - m) / 6 * (fm + 4 * frm + fb)
        if depth <= 0 or abs(left + right - whole) < 1e-14:
            return left + right + (left + right - whole) / 15
        return (simpson(f, a, m, fa, flm, fm, left, depth - 1)
                + simpson(f, m, b, fm, frm, fb, right, depth - 1))

    if t < 0:
        return 1.0 - t_cdf_quadrature(-t, df)
    f = lambda x: t_density(x, df)
    a, b = 0.0, t
    fa, fb = f(a), f(b)
    m = (a + b) / 2
    fm = f(m)
    whole = (b - a) / 6 * (fa + 4 * fm + fb)
    return 0.5 + simpson(f, a, b, fa, fm, fb, whole, 40)


class TestConfusion:
    def test_hand_counts(self):
        cm = confusion([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
        assert (cm.tp, cm.tn, cm.fp, cm.fn) == (2, 1, 1, 1)
        assert cm.total == 5

    def test_brute_force_large(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 2, size=10_000)
        p = rng.integers(0, 2, size=10_000)
        cm = confusion(y.tolist(), p.tolist())
        assert cm.tp == int(np.sum((y == 1) & (p == 1)))
        assert cm.tn == int(np.sum((y == 0) & (p == 0)))
        assert cm.fp == int(np.sum((y == 0) & (p == 1)))
        assert cm.fn == int(np.sum((y == 1) & (p == 0)))
        assert cm.total == 10_000

    def test_label_domain_checked(self):
        with pytest.raises(ContractError):
            confusion([0, 2], [0, 1])
        with pytest.raises(ContractError):
            confusion([0, 1], [0])


class TestMetrics:
    def test_worked_example(self):
        # 63 TP, 7 FP, 5 FN, 25 TN worked by hand
        m = metrics(ConfusionMatrix(tp=63, tn=25, fp=7, fn=5))
        assert m.accuracy == pytest.approx(0.88, abs=1e-12)
        assert m.precision == pytest.approx(0.9, abs=1e-12)
        assert m.recall == pytest.approx(63 / 68, abs=1e-12)
        assert m.f1 == pytest.approx(2 * 0.9 * (63 / 68) / (0.9 + 63 / 68), abs=1e-12)
        assert m.degenerate == ()

    def test_all_negative_degenerates(self):
        m = metrics(ConfusionMatrix(tp=0, tn=4, fp=0, fn=0))
        assert m.accuracy == 1.0
        assert (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0)
        assert m.degenerate == ("precision", "recall", "f1")

    def test_no_predicted_positive(self):
        m = metrics(ConfusionMatrix(tp=0, tn=3, fp=0, fn=2))
        assert m.degenerate == ("precision", "f1")
        assert m.recall == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            metrics(ConfusionMatrix(tp=0, tn=0, fp=0, fn=0))

    @given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50),
           st.integers(0, 50))
    @settings(max_examples=100, deadline=None)
    def test_ranges_and_f1_between_p_and_r(self, tp, tn, fp, fn):
        if tp + tn + fp + fn == 0:
            return
        m = metrics(ConfusionMatrix(tp=tp, tn=tn, fp=fp, fn=fn))
        for v in (m.accuracy, m.precision, m.recall, m.f1):
            assert 0.0 <= v <= 1.0
        if not m.degenerate:
            lo, hi = sorted((m.precision, m.recall))
            assert lo - 1e-12 <= m.f1 <= hi + 1e-12


class TestIntervals:
    def test_published_style_summary(self):
        ci = summary_ci(95.15, 0.57, 10)
        assert round(ci.ci_low, 3) == 94.797
        assert round(ci.ci_high, 3) == 95.503
        half = 1.96 * 0.57 / math.sqrt(10)  # fixed-quantile convention
        assert ci.ci_low == pytest.approx(95.15 - half, abs=1e-12)
        assert ci.ci_high == pytest.approx(95.15 + half, abs=1e-12)

    def test_mean_ci_matches_summary_path(self):
        vals = [3.1, 2.9, 3.4, 3.0, 3.2]
        ci = mean_ci(vals)
        ref = summary_ci(float(np.mean(vals)), float(np.std(vals, ddof=1)), 5)
        assert ci == ref

    def test_contracts(self):
        with pytest.raises(InsufficientDataError):
            summary_ci(1.0, 0.1, 1)
        with pytest.raises(ContractError):
            summary_ci(1.0, -0.1, 5)
        with pytest.raises(InsufficientDataError):
            mean_ci([1.0])
        with pytest.raises(NumericError):
            mean_ci([1.0, float("nan")])


class TestStudentT:
    @pytest.mark.parametrize("df", [1.0, 2.0, 5.0, 10.0, 30.0, 100.0])
    def test_cdf_against_quadrature(self, df):
        for t in np.linspace(-6.0, 6.0, 25):
            assert t_cdf(float(t), df) == pytest.approx(
                t_cdf_quadrature(float(t), df), abs=1e-10)

    def test_cauchy_closed_form(self):
        # df=1 is Cauchy: F(t) = 1/2 + arctan(t)/pi
        for t in (-3.0, -0.5, 0.0, 1.0, 4.0):
            assert t_cdf(t, 1.0) == pytest.approx(
                0.5 + math.atan(t) / math.pi, abs=1e-12)

    def test_symmetry_and_center(self):
        assert t_cdf(0.0, 7.0) == pytest.approx(0.5, abs=1e-14)
        for t in (0.3, 1.7, 5.0):
            assert t_cdf(-t, 7.0) == pytest.approx(1.0 - t_cdf(t, 7.0), abs=1e-13)

    def test_monotone_in_t(self):
        grid = np.linspace(-8, 8, 81)
        vals = [t_cdf(float(t), 4.0) for t in grid]
        assert all(b > a for a, b in zip(vals, vals[1:]))

    def test_critical_value_df10(self):
        crit = t_critical(10.0, 0.05)
        assert crit == pytest.approx(2.2281388519868415, abs=1e-9)
        # defining property: two-sided tail mass equals alpha
        assert 2 * (1 - t_cdf(crit, 10.0)) == pytest.approx(0.05, abs=1e-12)

    def test_critical_contracts(self):
        with pytest.raises(ContractError):
            t_critical(0.0, 0.05)
        with pytest.raises(ContractError):
            t_critical(10.0, 0.0)
        with pytest.raises(ContractError):
            t_critical(10.0, 1.0)

    def test_betainc_endpoints(self):
        assert betainc_reg(2.0, 3.0, 0.0) == 0.0
        assert betainc_reg(2.0, 3.0, 1.0) == 1.0
        # I_x(1, b) = 1 - (1-x)^b in closed form
        assert betainc_reg(1.0, 4.0, 0.3) == pytest.approx(
            1 - 0.7 ** 4, abs=1e-13)


class TestWelch:
    def test_raw_equals_summary_form(self):
        a = [94.1, 95.2, 94.8, 95.5, 94.9]
        b = [93.2, 93.9, 94.1, 93.5, 93.8]
        raw = welch_test(a, b)
        summ = welch_test(
            (float(np.mean(a)), float(np.std(a, ddof=1)), 5),
            (float(np.mean(b)), float(np.std(b, ddof=1)), 5))
        assert raw.t_stat == pytest.approx(summ.t_stat, abs=1e-12)
        assert raw.p_value == pytest.approx(summ.p_value, abs=1e-12)
        assert raw.df == pytest.approx(summ.df, abs=1e-12)

    def test_hand_checked_satterthwaite(self):
        # mean/std/n pairs worked through the Welch formulas by hand
        r = welch_test((10.0, 2.0, 8), (12.0, 3.0, 10))
        va, vb = 4.0 / 8, 9.0 / 10
        se = math.sqrt(va + vb)
        assert r.t_stat == pytest.approx(-2.0 / se, abs=1e-12)
        df = (va + vb) ** 2 / (va ** 2 / 7 + vb ** 2 / 9)
        assert r.df == pytest.approx(df, abs=1e-12)
        assert r.diff == pytest.approx(-2.0, abs=1e-12)
        assert r.ci_low < r.diff < r.ci_high

    def test_reported_band_style_case(self):
        # summary rows mirroring a two-configuration comparison table:
        # 94.32 +- 0.61 vs 95.54 +- 0.48 over 10 replications each
        r = welch_test((94.32, 0.61, 10), (95.54, 0.48, 10))
        assert r.diff == pytest.approx(-1.22, abs=1e-9)
        assert 0.0001 < r.p_value < 0.05
        assert r.significant

    def test_alpha_changes_verdict_and_interval(self):
        r5 = welch_test((10.0, 1.0, 6), (11.8, 1.0, 6), alpha=0.05)
        r1 = welch_test((10.0, 1.0, 6), (11.8, 1.0, 6), alpha=0.001)
        assert r5.significant and not r1.significant
        assert (r1.ci_high - r1.ci_low) > (r5.ci_high - r5.ci_low)

    def test_identical_zero_variance(self):
        r = welch_test([2.0, 2.0, 2.0], [2.0, 2.0, 2.0])
        assert r.t_stat == 0.0 and r.p_value == 1.0 and not r.significant
        assert not r.degenerate

    def test_separated_zero_variance(self):
        r = welch_test([1.0, 1.0], [3.0, 3.0])
        assert math.isinf(r.t_stat) and r.t_stat < 0
        assert r.p_value == 0.0 and r.significant and r.degenerate

    def test_paired_reduces_to_one_sample(self):
        a = [1.0, 2.0, 3.0, 4.0]
        b = [1.5, 2.1, 3.7, 4.4]
        r = welch_test(a, b, paired=True)
        d = np.array(a) - np.array(b)
        se = d.std(ddof=1) / 2.0
        assert r.t_stat == pytest.approx(float(d.mean()) / se, abs=1e-12)
        assert r.df == 3.0

    def test_paired_needs_equal_length_raw(self):
        with pytest.raises(ContractError):
            welch_test([1.0, 2.0], [1.0, 2.0, 3.0], paired=True)
        with pytest.raises(ContractError):
            welch_test((1.0, 0.5, 5), (1.2, 0.5, 5), paired=True)

    def test_input_contracts(self):
        with pytest.raises(InsufficientDataError):
            welch_test([1.0], [1.0, 2.0])
        with pytest.raises(NumericError):
            welch_test([1.0, float("inf")], [1.0, 2.0])

    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=8),
           st.lists(st.floats(-10, 10), min_size=2, max_size=8))
    @settings(max_examples=60, deadline=None)
    def test_antisymmetric_in_arguments(self, a, b):
        r_ab = welch_test(a, b)
        r_ba = welch_test(b, a)
        assert r_ab.t_stat == pytest.approx(-r_ba.t_stat, abs=1e-10)
        assert r_ab.p_value == pytest.approx(r_ba.p_value, abs=1e-10)


class TestPairwise:
    def test_all_unordered_pairs_once(self):
        configs = [(name, {"accuracy": [i + 1.0, i + 2.0, i + 3.0]})
                   for i, name in enumerate("abcd")]
        table = pairwise_table(configs)
        pairs = [(x, y) for x, y, _ in table["accuracy"]]
        assert pairs == [("a", "b"), ("a", "c"), ("a", "d"),
                         ("b", "c"), ("b", "d"), ("c", "d")]

    def test_reports_match_direct_calls(self):
        configs = [("x", {"f1": [0.8, 0.82, 0.78]}),
                   ("y", {"f1": [0.9, 0.91, 0.89]})]
        table = pairwise_table(configs)
        ((x, y, report),) = table["f1"]
        direct = welch_test([0.8, 0.82, 0.78], [0.9, 0.91, 0.89])
        assert report == direct

    def test_needs_two_configs(self):
        with pytest.raises(ContractError):
            pairwise_table([("only", {"accuracy": [1.0, 2.0]})])
