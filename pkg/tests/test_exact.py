import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import small_data
from sparsepost.errors import FeasibilityError, ValidationError
from sparsepost.exact import (
    approx_conditional_pip,
    approx_h_group,
    approx_h_variant,
    approx_pip_basic,
    approx_pip_multi,
    confidence_set,
    enumerate_posterior,
    exact_conditional_pip,
    exact_pips,
    from_log_posteriors,
    model_count,
)
from sparsepost.model import (
    DataSet,
    Hyperparameters,
    IndicatorState,
    PriorSpec,
    log_marginal_likelihood_trait,
    log_prior_indicators,
)
from sparsepost.sampler import SamplerConfig, run_ensemble


def naive_scores(data, tau, K, hyper=None):
    """Score every subset with a plain double loop over sizes and subsets."""
    hyper = hyper or Hyperparameters()
    spec = PriorSpec("basic", hyper)
    out = {}
    y = data.Y[:, 0]
    for k in range(K):
        for sub in itertools.combinations(range(data.p), k):
            z = np.zeros(data.p)
            z[list(sub)] = 1
            lp = log_marginal_likelihood_trait(data.X, y, z, tau, hyper)
            lp += log_prior_indicators(spec, IndicatorState(z, tau))
            out[frozenset(sub)] = lp
    return out


def test_count_p3_k2():
    data = small_data(n=40, p=3, q=1)
    table = enumerate_posterior(data, tau_fixed=0.3, K=2)
    assert len(table) == 4 == model_count(3, 2)
    assert table.prob.sum() == pytest.approx(1.0, abs=1e-12)
    assert all(len(c) < 2 for c, _ in table.entries)


def test_top_configuration_matches_naive_argmax():
    data = small_data(n=120, p=10, q=1, seed=4, signal=((2, 0, 0.4), (7, 0, 0.3)))
    table = enumerate_posterior(data, tau_fixed=0.2, K=4)
    naive = naive_scores(data, 0.2, 4)
    best = max(naive, key=naive.get)
    assert table.map_configuration == best
    # and every score agrees, not just the winner
    for (cfg, _), lp in zip(table.entries, table.log_post):
        assert lp == pytest.approx(naive[cfg], abs=1e-9)
    assert len(table) == len(naive)


def test_probabilities_sorted_and_normalized():
    data = small_data(n=80, p=8, q=1, seed=2)
    table = enumerate_posterior(data, tau_fixed=0.3, K=5)
    assert np.all(np.diff(table.prob) <= 0)
    assert table.prob.sum() == pytest.approx(1.0, abs=1e-10)


def test_worker_count_does_not_change_result():
    data = small_data(n=80, p=9, q=1, seed=2)
    a = enumerate_posterior(data, tau_fixed=0.3, K=4)
    b = enumerate_posterior(data, tau_fixed=0.3, K=4, n_workers=3)
    np.testing.assert_array_equal(a.prob, b.prob)
    np.testing.assert_array_equal(a.members, b.members)


def test_uniform_prior_limit_gives_binomial_ratio():
    # A = B -> infinity at mean 1/2: prior mass ratio between sizes k+1 and k -> 1 per configuration
    p = 10
    spec = PriorSpec("basic", Hyperparameters(a_omega=1e6, b_omega=1e6))
    z = np.zeros(p)
    for k in range(p - 1):
        lo = log_prior_indicators(spec, IndicatorState(z.copy(), 1.0))
        z[k] = 1
        hi = log_prior_indicators(spec, IndicatorState(z.copy(), 1.0))
        assert math.exp(hi - lo) == pytest.approx(1.0, abs=1e-4)


def test_single_configuration_table_has_zero_pips():
    table = from_log_posteriors([()], [0.0], K=3, tau=0.05, p=4)
    np.testing.assert_array_equal(exact_pips(table), 0.0)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 5000), K=st.integers(1, 5))
def test_pips_sum_to_expected_size(seed, K):
    data = small_data(n=60, p=7, q=1, seed=seed)
    table = enumerate_posterior(data, tau_fixed=0.4, K=K)
    pips = exact_pips(table)
    assert np.all((pips >= 0) & (pips <= 1))
    assert pips.sum() == pytest.approx(float(table.prob @ table.sizes), abs=1e-12)


def test_pips_match_mcmc():
    data = small_data(n=80, p=6, q=1, seed=9, signal=((1, 0, 0.35), (4, 0, 0.25)))
    table = enumerate_posterior(data, tau_fixed=0.3, K=7)
    assert table.n_excluded == 0 and len(table) == 64
    summ = run_ensemble(SamplerConfig(n_chains=4, burn_in=2000, n_samples=200_000,
                                      fixed_tau=0.3, seed=2), PriorSpec("basic"), data)
    assert np.abs(summ.z_bar[:, 0] - exact_pips(table)).max() < 0.02


def test_feasibility_guard():
    rng = np.random.default_rng(0)
    data = DataSet(rng.standard_normal((50, 200)), rng.standard_normal(50))
    with pytest.raises(FeasibilityError) as err:
        enumerate_posterior(data, tau_fixed=0.3, K=8)
    assert err.value.count == model_count(200, 8)


def test_singular_configurations_are_excluded():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((40, 4))
    X[:, 3] = X[:, 0] + X[:, 1]
    data = DataSet(X, rng.standard_normal(40))
    table = enumerate_posterior(data, tau_fixed=0.3, K=5)
    assert table.n_excluded == 2  # {0,1,3} and {0,1,2,3}
    assert frozenset({0, 1, 3}) not in {c for c, _ in table.entries}


# -- confidence sets --------------------------------------------------------

def _toy_table():
    return from_log_posteriors([(), (1,), (2,)], np.log([0.5, 0.4, 0.1]), K=2, tau=0.05, p=3)


def test_confidence_set_examples():
    cs = confidence_set(_toy_table(), 0.7)
    assert cs.variants == [1] and cs.probability == pytest.approx(0.9)
    assert cs.cumulative[0] == pytest.approx(0.5)  # P(empty set) is the null mass
    cs = confidence_set(_toy_table(), 0.95)
    assert cs.variants == [1, 2] and cs.probability == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        confidence_set(_toy_table(), 1.0)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 5000), thr=st.floats(0.05, 0.99))
def test_confidence_set_mass_is_monotone(seed, thr):
    data = small_data(n=60, p=7, q=1, seed=seed)
    table = enumerate_posterior(data, tau_fixed=0.3, K=4)
    cs = confidence_set(table, thr)
    assert np.all(np.diff(cs.cumulative) >= -1e-15)
    assert cs.probability >= thr - 1e-12
    # recompute P(S) directly
    S = set(cs.variants)
    direct = sum(pr for cfg, pr in table.entries if cfg <= S)
    assert direct == pytest.approx(cs.probability, abs=1e-12)


# -- approximations ---------------------------------------------------------

def test_no_signal_case():
    tau, n, p, a, b = 0.05, 5000, 20, 1.0, 1.0
    c = tau * math.sqrt(n) * (b + p - 1) / a
    assert approx_pip_basic(tau, n, p, 0, 0.0, a, b) == pytest.approx(1 / (1 + c), rel=1e-12)


def test_approximation_is_monotone():
    vals_p = [approx_pip_basic(0.05, 5000, p, 2, 0.03) for p in range(5, 60)]
    assert np.all(np.diff(vals_p) < 0)
    vals_k = [approx_pip_basic(0.05, 5000, 60, k, 0.03) for k in range(0, 50)]
    assert np.all(np.diff(vals_k) > 0)


def test_single_trait_row_sum_collapses():
    # with q = 1 the sum over rows has two terms; h_v equals the W-prior factor times the Z odds
    tau, n, p, w_other, e = 0.05, 5000, 30, 3, 0.04
    a_w, b_w, a_v, b_v = 2.0, 5.0, 1.5, 2.5
    log_h = approx_h_variant(tau, n, p, w_other, np.array([e]), a_w, b_w, a_v, b_v)
    # B(a_v+s, b_v+1-s)/B(a_v,b_v) for s=0 is b_v/(a_v+b_v), for s=1 a_v/(a_v+b_v)
    want = math.log((a_w + w_other) / (b_w + p - w_other - 1)) + math.log(
        b_v / (a_v + b_v) + a_v / (a_v + b_v) * (1 - e**2) ** (-n / 2) / (tau * math.sqrt(n)))
    assert log_h == pytest.approx(want, rel=1e-12)
    # the multi-trait odds reduce to the single-variant form
    m = approx_pip_multi(tau, n, 1, 0, e, a_v, b_v)
    assert m == pytest.approx(approx_pip_basic(tau, n, 1, 0, e, a_v, b_v))


def test_group_sum_brute_force():
    tau, n, r, g_other = 0.05, 5000, 12, 2
    etas = np.array([0.01, 0.03, 0.0, 0.02])
    got = approx_h_group(tau, n, r, g_other, etas, 1.0, 3.0, 2.0, 2.0)
    from scipy.special import betaln
    m = etas.size
    total = 0.0
    for bits in itertools.product((0, 1), repeat=m):
        s = sum(bits)
        term = math.exp(betaln(2.0 + s, 2.0 + m - s) - betaln(2.0, 2.0))
        for on, e in zip(bits, etas):
            if on:
                term *= (1 - e**2) ** (-n / 2) / (tau * math.sqrt(n))
        total += term
    want = math.log((1.0 + g_other) / (3.0 + r - g_other - 1)) + math.log(total)
    assert got == pytest.approx(want, rel=1e-12)
    single = approx_h_group(tau, n, r, g_other, np.array([0.02]), 1.0, 3.0)
    assert single == pytest.approx(math.log((1.0 + g_other) / (3.0 + r - g_other - 1))
                                   - n / 2 * math.log(1 - 0.02**2) - math.log(tau * math.sqrt(n)))


def test_dispatch_and_clamp_warning():
    assert approx_conditional_pip("basic", tau=0.05, n=100, p=5, k_other=0, eta_v=0.1) == \
        approx_pip_basic(0.05, 100, 5, 0, 0.1)
    with pytest.warns(RuntimeWarning):
        v = approx_pip_basic(0.05, 100, 5, 0, 1.0)
    assert 0.0 <= v <= 1.0
    with pytest.raises(ValidationError):
        approx_conditional_pip("nope")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        approx_pip_basic(0.05, 100, 5, 0, 0.5)


def test_conditional_pip_from_enumeration_equals_flip():
    data = small_data(n=80, p=6, q=1, seed=3)
    table = enumerate_posterior(data, tau_fixed=0.3, K=7)
    probs = dict(table.entries)
    for v, others in [(0, ()), (2, (1, 4)), (5, (0,))]:
        on = probs[frozenset(others) | {v}]
        off = probs[frozenset(others)]
        assert exact_conditional_pip(data, v, others, 0.3) == pytest.approx(on / (on + off), rel=1e-9)
