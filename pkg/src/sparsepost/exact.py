"""Exhaustive posterior over small model spaces and closed-form diagnostics.

For a single trait, a fixed ``tau`` and the basic prior, every configuration
with fewer than ``K`` active variants is scored and normalized.  The table
feeds exact inclusion probabilities, greedy confidence sets and the checks
of the orthogonal-design approximations below.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import numpy as np
from scipy.special import betaln, logsumexp

from . import _kernels as kern
from .errors import FeasibilityError, ValidationError
from .model import Covariance, Hyperparameters

MAX_CONFIGS = 10**8


@dataclass
class EnumerationTable:
    """Normalized posterior over all configurations with |Z| < K, sorted by probability."""

    members: np.ndarray     # (N, K-1) variant indices, padded with -1
    sizes: np.ndarray       # (N,)
    log_post: np.ndarray    # unnormalized log posterior
    prob: np.ndarray
    K: int
    tau_fixed: float
    p: int
    n_excluded: int = 0

    def __len__(self):
        return self.prob.size

    @property
    def entries(self):
        return [(frozenset(m[:s].tolist()), float(pr))
                for m, s, pr in zip(self.members, self.sizes, self.prob)]

    def indicator_matrix(self):
        M = np.zeros((len(self), self.p), dtype=bool)
        rows = np.repeat(np.arange(len(self)), self.sizes)
        M[rows, self.members[self.members >= 0]] = True
        return M

    def bitmask_hex(self):
        out = []
        for m, s in zip(self.members, self.sizes):
            out.append(hex(sum(1 << int(v) for v in m[:s])))
        return out

    @property
    def map_configuration(self):
        return frozenset(self.members[0, :self.sizes[0]].tolist())


def model_count(p, K):
    return sum(math.comb(p, k) for k in range(min(K, p + 1)))


def from_log_posteriors(configs, log_post, K, tau, p):
    """Build a table from explicit configurations (iterables of indices) and log scores."""
    width = max(K - 1, 1)
    members = np.full((len(configs), width), -1, dtype=np.int64)
    sizes = np.zeros(len(configs), dtype=np.int64)
    for i, c in enumerate(configs):
        c = sorted(c)
        members[i, :len(c)] = c
        sizes[i] = len(c)
    return _finish(members, sizes, np.asarray(log_post, float), K, tau, p, 0)


def _finish(members, sizes, log_post, K, tau, p, excluded):
    prob = np.exp(log_post - logsumexp(log_post))
    prob /= prob.sum()
    order = np.lexsort((np.arange(prob.size), -prob))
    return EnumerationTable(members[order], sizes[order], log_post[order], prob[order],
                            K, float(tau), p, excluded)


def enumerate_posterior(data, hyper=None, tau_fixed=0.05, K=4, trait=0, n_workers=1):
    """Score all configurations with fewer than ``K`` variants for one trait.

    Numerically singular configurations (and, under the g-prior, those with
    |Z| >= n) carry zero mass and are left out; their number is recorded in
    ``n_excluded``.
    """
    hyper = hyper or Hyperparameters()
    if K < 1:
        raise ValidationError("K must be at least 1")
    if not hyper.tau_lo < tau_fixed < hyper.tau_hi:
        raise ValidationError(f"tau={tau_fixed} outside ({hyper.tau_lo}, {hyper.tau_hi})")
    p, n = data.p, data.n
    total = model_count(p, K)
    if total > MAX_CONFIGS:
        raise FeasibilityError(
            f"{total} configurations exceed the enumeration limit {MAX_CONFIGS}", count=total)
    gprior = hyper.covariance is Covariance.GPRIOR
    D = min(K - 1, p)
    if gprior:
        D = min(D, n - 1)
    xty = np.ascontiguousarray(data.xty[:, trait])
    yty = float(data.yty[trait])
    cov = kern.GPRIOR if gprior else kern.IDENTITY
    empty_lp = kern.trait_loglik(0, 0.0, 0.0, n, yty, tau_fixed, cov,
                                 hyper.alpha_rho, hyper.lambda_rho)
    width = max(K - 1, 1)

    def run(lead):
        cnt = sum(math.comb(p - lead - 1, j) for j in range(D))
        members = np.empty((cnt, width), dtype=np.int64)
        sizes = np.empty(cnt, dtype=np.int64)
        lp = np.empty(cnt)
        got = kern.enumerate_kernel(data.gram, xty, yty, n, cov, hyper.alpha_rho,
                                    hyper.lambda_rho, tau_fixed, hyper.a_omega, hyper.b_omega,
                                    D, lead, lead + 1, members, sizes, lp)
        return members[:got], sizes[:got], lp[:got]

    leads = range(p) if D > 0 else range(0)
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            parts = list(pool.map(run, leads))
    else:
        parts = [run(v) for v in leads]
    members = np.concatenate([np.full((1, width), -1, np.int64)] + [m for m, _, _ in parts])
    sizes = np.concatenate([[0]] + [s for _, s, _ in parts]).astype(np.int64)
    lp = np.concatenate([[empty_lp + kern.lb_ratio(hyper.a_omega, hyper.b_omega, 0, p)]]
                        + [x for _, _, x in parts])
    excluded = total - lp.size
    return _finish(members, sizes, lp, K, tau_fixed, p, excluded)


def exact_pips(table):
    pips = np.zeros(table.p)
    rows = np.repeat(np.arange(len(table)), table.sizes)
    np.add.at(pips, table.members[table.members >= 0], table.prob[rows])
    return np.clip(pips, 0.0, 1.0)


@dataclass
class ConfidenceSet:
    variants: list
    cumulative: list   # P(S) after each addition; cumulative[0] is P(empty set)

    @property
    def probability(self):
        return self.cumulative[-1]


def confidence_set(table, threshold=0.7):
    """Greedy smallest set S whose supported configurations carry mass >= threshold.

    P(S) is the probability that every active variant lies in S.  At each step
    the variant raising P(S) the most is added (lowest index on ties); if no
    single variant helps, the one carrying most of the still-uncovered mass
    is taken so the procedure always terminates.
    """
    if not 0.0 < threshold < 1.0:
        raise ValidationError("threshold must lie in (0, 1)")
    M = table.indicator_matrix()
    prob = table.prob
    sizes = table.sizes
    in_s = np.zeros(table.p, dtype=bool)
    inside = np.zeros(len(table), dtype=np.int64)
    chosen = []
    covered = float(prob[sizes == 0].sum())
    cum = [covered]
    while covered < threshold - 1e-15:
        missing = sizes - inside
        if np.all(in_s) or not np.any(missing > 0):
            raise RuntimeError("threshold unreachable: table probabilities do not sum to 1")
        one = missing == 1
        gains = prob[one] @ M[one] if one.any() else np.zeros(table.p)
        gains[in_s] = -1.0
        if gains.max() <= 0.0:
            unc = missing > 0
            gains = prob[unc] @ M[unc]
            gains[in_s] = -1.0
        v = int(np.argmax(gains))
        chosen.append(v)
        in_s[v] = True
        inside += M[:, v]
        covered = float(prob[inside == sizes].sum())
        cum.append(covered)
    return ConfidenceSet(chosen, cum)


# -- orthogonal-design approximations ---------------------------------------

def eta(x, y):
    """x'y / sqrt(n y'y), roughly the correlation of x and y."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    return float(x @ y / math.sqrt(x.size * (y @ y)))


def _log1m_eta2(e):
    e2 = np.asarray(e, float) ** 2
    clamped = e2 >= 1.0
    if np.any(clamped):
        warnings.warn("eta^2 >= 1 clamped to 1 - 1e-12", RuntimeWarning, stacklevel=3)
        e2 = np.minimum(e2, 1.0 - 1e-12)
    return np.log1p(-e2)


def _expectation_from_log_odds(log_inv_odds):
    # E = 1 / (1 + exp(log_inv_odds))
    return float(np.exp(-np.logaddexp(0.0, log_inv_odds)))


def approx_pip_basic(tau, n, p, k_other, eta_v, a_omega=1.0, b_omega=1.0):
    """Conditional inclusion probability of one variant, basic prior, orthogonal design."""
    log_c = (math.log(tau * math.sqrt(n)) + math.log(b_omega + p - k_other - 1)
             - math.log(a_omega + k_other) + 0.5 * n * float(_log1m_eta2(eta_v)))
    return _expectation_from_log_odds(log_c)


def approx_pip_multi(tau, n, q, s_other, eta_vt, a_v=1.0, b_v=1.0):
    """Same as :func:`approx_pip_basic` with traits taking the role of variants."""
    return approx_pip_basic(tau, n, q, s_other, eta_vt, a_v, b_v)


def _subset_sum(log_terms, a, b, tau_rootn):
    """log of sum over all subsets S of prod_{i in S} exp(log_terms_i) * B(a+|S|, b+m-|S|)/B(a,b)/c^|S|.

    The sum only depends on |S| through the beta factor, so the elementary
    symmetric polynomials of the per-element terms are accumulated in log space.
    """
    m = len(log_terms)
    e = np.full(m + 1, -np.inf)
    e[0] = 0.0
    for x in log_terms:
        e[1:] = np.logaddexp(e[1:], e[:-1] + x)
    k = np.arange(m + 1)
    return float(logsumexp(e + betaln(a + k, b + m - k) - betaln(a, b) - k * math.log(tau_rootn)))


def approx_h_variant(tau, n, p, w_other, eta_row, a_w=1.0, b_w=1.0, a_v=1.0, b_v=1.0):
    """log h_v for the across-traits layer (sum over all 2^q rows of Z)."""
    lt = -0.5 * n * _log1m_eta2(eta_row)
    return (math.log(a_w + w_other) - math.log(b_w + p - w_other - 1)
            + _subset_sum(np.atleast_1d(lt), a_v, b_v, tau * math.sqrt(n)))


def approx_h_group(tau, n, r, g_other, eta_group, a_g=1.0, b_g=1.0, a_ng=1.0, b_ng=1.0):
    """log h_g for the across-sites layer; a lone variant replaces the sum by one term."""
    lt = np.atleast_1d(-0.5 * n * _log1m_eta2(eta_group))
    prefix = math.log(a_g + g_other) - math.log(b_g + r - g_other - 1)
    if lt.size == 1:
        return prefix + float(lt[0]) - math.log(tau * math.sqrt(n))
    return prefix + _subset_sum(lt, a_ng, b_ng, tau * math.sqrt(n))


def approx_conditional_pip(kind, **inputs):
    """Dispatch: ``basic`` (Z_v), ``multi`` (Z_vt), ``variant`` (W_v) or ``group`` (G_g)."""
    if kind == "basic":
        return approx_pip_basic(**inputs)
    if kind == "multi":
        return approx_pip_multi(**inputs)
    if kind == "variant":
        return _expectation_from_log_odds(-approx_h_variant(**inputs))
    if kind == "group":
        return _expectation_from_log_odds(-approx_h_group(**inputs))
    raise ValidationError(f"unknown approximation {kind!r}")


def exact_conditional_pip(data, v, others, tau, hyper=None, trait=0):
    """Exact E[Z_v | Z_[-v]] at fixed tau under the basic prior (single trait)."""
    from .model import PriorKind, PriorSpec, IndicatorState, flip_log_odds
    hyper = hyper or Hyperparameters()
    spec = PriorSpec(PriorKind.BASIC, hyper)
    Z = np.zeros((data.p, data.q), np.int8)
    Z[list(others), trait] = 1
    Z[v, trait] = 0
    lo = flip_log_odds(spec, IndicatorState(Z, tau), v, trait, data)
    return _expectation_from_log_odds(-lo)
