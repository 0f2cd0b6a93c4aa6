import math

import numpy as np
import pytest
import scipy.special as sp
import scipy.stats as st
from hypothesis import given, settings
from hypothesis import strategies as hs

from metatutor.stats import (
    SampleSet,
    Summary,
    bonferroni,
    chi2_sf,
    chi_square_independence,
    cohens_d,
    describe,
    f_sf,
    mean,
    nlg,
    one_way_anova,
    reg_inc_beta,
    reg_inc_gamma_upper,
    sd,
    t_sf_two_sided,
    t_test_ind,
)

# frozen from mpmath at 30 digits
BETA_CASES = [
    (0.5, 0.5, 0.3, 0.36901011956554538),
    (2, 3, 0.4, 0.5248),
    (10, 0.5, 0.9, 0.15164090963470997),
    (21, 0.5, 0.8, 0.0023380390111630904),
    (50, 60, 0.45, 0.46423529143060363),
    (1, 1, 0.25, 0.25),
]
GAMMA_CASES = [
    (1, 1, 0.36787944117144232),
    (0.5, 2, 0.045500263896358414),
    (3, 2.5, 0.54381311588332952),
    (10, 15, 0.069853660699409768),
    (1, 1.6241764254396793, 0.19707391344899774),
    (5, 0.1, 0.99999992332198314),
]


@pytest.mark.parametrize("a,b,x,expected", BETA_CASES)
def test_incomplete_beta_matches_frozen_oracle(a, b, x, expected):
    assert reg_inc_beta(a, b, x) == pytest.approx(expected, rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("s,x,expected", GAMMA_CASES)
def test_upper_incomplete_gamma_matches_frozen_oracle(s, x, expected):
    assert reg_inc_gamma_upper(s, x) == pytest.approx(expected, rel=1e-12, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(a=hs.floats(0.05, 200), b=hs.floats(0.05, 200), x=hs.floats(0, 1))
def test_incomplete_beta_against_scipy(a, b, x):
    assert reg_inc_beta(a, b, x) == pytest.approx(sp.betainc(a, b, x), rel=1e-9, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(s=hs.floats(0.05, 200), x=hs.floats(0, 400))
def test_incomplete_gamma_against_scipy(s, x):
    assert reg_inc_gamma_upper(s, x) == pytest.approx(sp.gammaincc(s, x), rel=1e-9, abs=1e-12)


def test_special_function_domain_errors():
    with pytest.raises(ValueError):
        reg_inc_beta(0, 1, 0.5)
    with pytest.raises(ValueError):
        reg_inc_beta(1, 1, 1.5)
    with pytest.raises(ValueError):
        reg_inc_gamma_upper(-1, 1)
    with pytest.raises(ValueError):
        reg_inc_gamma_upper(1, -1)
    assert reg_inc_gamma_upper(2, 0) == 1.0
    assert reg_inc_gamma_upper(2, math.inf) == 0.0


def test_distribution_tails():
    assert t_sf_two_sided(0.0, 10) == pytest.approx(1.0)
    assert t_sf_two_sided(2.228138851986, 10) == pytest.approx(0.05, abs=1e-9)
    assert f_sf(0.0, 2, 10) == 1.0
    assert chi2_sf(5.991464547107979, 2) == pytest.approx(0.05, abs=1e-12)


def test_describe_and_sd():
    s = describe([2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0])
    assert s.mean == 5.0
    assert s.sd == pytest.approx(2.138089935299395)
    assert s.n == 8
    assert math.isnan(describe([3.0]).sd)
    with pytest.raises(ValueError):
        sd([1.0])
    with pytest.raises(ValueError):
        mean([])
    assert describe(SampleSet([1, 2, 3], "g")).mean == 2.0


A = [1.2, 2.3, 3.1, 4.8, 5.0, 2.2]
B = [3.3, 4.1, 5.9, 6.2, 4.4]
C = [0.5, 1.1, 0.9, 1.7]


def test_student_t_matches_frozen_oracle():
    r = t_test_ind(A, B)
    assert r.t == pytest.approx(-1.9824091807784419, rel=1e-12)
    assert r.df == 9
    assert r.p == pytest.approx(0.07875354887059337, rel=1e-10)


def test_welch_t_matches_frozen_oracle():
    r = t_test_ind(A, B, equal_var=False)
    assert r.t == pytest.approx(-2.0243412763982715, rel=1e-12)
    assert r.df == pytest.approx(8.999438323291418, rel=1e-10)
    assert r.p == pytest.approx(0.07360614835251252, rel=1e-9)


def test_t_from_summaries_equals_t_from_samples():
    sa, sb = describe(A), describe(B)
    assert t_test_ind(sa, sb).t == pytest.approx(t_test_ind(A, B).t, rel=1e-12)


def test_t_degenerate_cases():
    same = t_test_ind([1.0, 1.0, 1.0], [1.0, 1.0])
    assert (same.t, same.p, same.d) == (0.0, 1.0, 0.0)
    apart = t_test_ind([2.0, 2.0], [1.0, 1.0])
    assert apart.capped and math.isinf(apart.t) and apart.p == 0.0
    with pytest.raises(ValueError):
        t_test_ind([1.0], [1.0, 2.0])


def test_cohens_d_uses_pooled_sd():
    # pooled sd of (5, 11) with equal n is sqrt((25 + 121) / 2)
    d = cohens_d(Summary(87.7, 5, 22), Summary(80.2, 11, 22))
    assert d == pytest.approx(7.5 / math.sqrt(73.0), rel=1e-12)


def test_anova_matches_frozen_oracle():
    r = one_way_anova([A, B, C])
    assert r.F == pytest.approx(10.094460768309933, rel=1e-12)
    assert (r.df_between, r.df_within) == (2, 12)
    assert r.p == pytest.approx(0.002684410437635176, rel=1e-9)


def test_anova_degenerate_conventions():
    r = one_way_anova([[3.0, 3.0], [3.0, 3.0, 3.0]])
    assert r.degenerate and r.F == 0.0 and r.p == 1.0
    r = one_way_anova([[1.0, 1.0], [2.0, 2.0]])
    assert r.degenerate and math.isinf(r.F) and r.p == 0.0
    with pytest.raises(ValueError):
        one_way_anova([[1.0, 2.0]])


def test_chi_square_matches_frozen_oracle():
    r = chi_square_independence([[10, 20], [30, 15]])
    assert r.chi2 == pytest.approx(8.035714285714285, rel=1e-12)
    assert r.df == 1
    assert r.p == pytest.approx(0.0045863920802535025, rel=1e-10)


def test_chi_square_proportional_rows_is_zero():
    r = chi_square_independence([[1, 2, 3], [2, 4, 6]])
    assert r.chi2 == pytest.approx(0.0, abs=1e-12)
    assert r.p == pytest.approx(1.0)


def test_chi_square_errors():
    with pytest.raises(ValueError):
        chi_square_independence([[1, 2, 3]])
    with pytest.raises(ValueError):
        chi_square_independence([[1, 0], [2, 0]])
    with pytest.raises(ValueError):
        chi_square_independence([[1, -1], [2, 3]])


@settings(max_examples=100, deadline=None)
@given(hs.lists(hs.lists(hs.integers(1, 500), min_size=3, max_size=3), min_size=2, max_size=4))
def test_chi_square_against_scipy(table):
    r = chi_square_independence(table)
    chi2, p, df, _ = st.chi2_contingency(np.array(table), correction=False)
    assert r.chi2 == pytest.approx(chi2, rel=1e-9, abs=1e-9)
    assert r.df == df
    assert r.p == pytest.approx(p, rel=1e-7, abs=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
@settings(max_examples=100, deadline=None)
@given(hs.lists(hs.floats(-100, 100), min_size=2, max_size=30),
       hs.lists(hs.floats(-100, 100), min_size=2, max_size=30))
def test_t_test_against_scipy(a, b):
    r = t_test_ind(a, b)
    if r.capped or np.var(a) + np.var(b) < 1e-12:
        return
    ref = st.ttest_ind(a, b)
    assert r.t == pytest.approx(ref.statistic, rel=1e-7, abs=1e-9)
    assert r.p == pytest.approx(ref.pvalue, rel=1e-6, abs=1e-12)


def test_nlg_values_and_errors():
    assert nlg(0.556, 0.877, 1.0) == pytest.approx(0.4817409307, abs=1e-9)
    assert nlg(64.0, 100.0) == pytest.approx(6.0)
    with pytest.raises(ZeroDivisionError):
        nlg(100.0, 100.0)
    with pytest.raises(ValueError):
        nlg(50.0, 120.0)


def test_bonferroni():
    assert bonferroni(0.05, 10) == pytest.approx(0.005, abs=1e-15)
    with pytest.raises(ValueError):
        bonferroni(0.05, 0)
    with pytest.raises(ValueError):
        bonferroni(0.0, 3)
