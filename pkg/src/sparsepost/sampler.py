"""Metropolis-within-Gibbs sampler over (Z, W or G, tau).

The hot loop lives in :mod:`sparsepost._kernels`.  This module builds the
inputs, seeds the chains, pools the running sums and exposes small Python
versions of the proposal mechanics (``propose_tau``, ``propose_indicators``,
``proposal_log_prob``, ``mh_accept``) that are used for unit checks and by
callers who want to drive a chain by hand.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import betaln, comb
from scipy.stats import norm

from . import _kernels as K
from .errors import InfeasibleModelError, InvalidStateError, SingularDesignError, ValidationError
from .model import (
    Covariance,
    IndicatorState,
    PriorKind,
    check_state,
    complete_state,
    trait_terms,
)

_KIND_CODE = {
    PriorKind.BASIC: K.BASIC,
    PriorKind.UNADJUSTED: K.UNADJUSTED,
    PriorKind.ACROSS_TRAITS: K.ACROSS_TRAITS,
    PriorKind.ACROSS_SITES: K.ACROSS_SITES,
}


# -- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class ChainInit:
    """Starting rule for one chain: ``empty``, ``full`` or ``top`` (J most correlated per trait)."""

    rule: str
    j: int = 0

    def __post_init__(self):
        if self.rule not in ("empty", "full", "top"):
            raise ValidationError(f"unknown chain start rule {self.rule!r}")
        if self.rule == "top" and self.j < 1:
            raise ValidationError("top-correlated start needs J >= 1")

    @classmethod
    def parse(cls, text):
        text = text.strip().lower()
        if text.startswith("top"):
            return cls("top", int(text[3:].lstrip(":=")))
        return cls(text)

    def __str__(self):
        return f"top{self.j}" if self.rule == "top" else self.rule


DEFAULT_INITS = (ChainInit("empty"), ChainInit("full"), ChainInit("top", 10), ChainInit("top", 20))


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 4
    burn_in: int = 10_000
    n_samples: int = 500_000
    pi_plus: float = 0.5
    pi_zero_star: float = 0.5
    pi_minus_star: float = 0.25
    pi_plus_star: float = 0.25
    chain_inits: Optional[Sequence[ChainInit]] = None
    seed: int = 0
    delta_threshold: float = 0.05
    fixed_tau: Optional[float] = None
    tau_init: Optional[float] = None
    update_indicators: bool = True
    thin: int = 0
    debug: bool = False
    n_workers: int = 1

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValidationError("need at least one chain")
        if self.burn_in < 0 or self.n_samples < 1:
            raise ValidationError("burn_in must be >= 0 and n_samples >= 1")
        for name in ("pi_plus", "pi_zero_star", "pi_minus_star", "pi_plus_star"):
            val = getattr(self, name)
            if not 0.0 < val < 1.0:
                raise ValidationError(f"{name} must lie in (0, 1)")
        if abs(self.pi_zero_star + self.pi_minus_star + self.pi_plus_star - 1.0) > 1e-12:
            raise ValidationError("pi_zero_star + pi_minus_star + pi_plus_star must equal 1")
        if not 0.0 < self.delta_threshold < 1.0:
            raise ValidationError("delta_threshold must lie in (0, 1)")
        if self.thin < 0:
            raise ValidationError("thin must be >= 0")

    def init_for(self, c):
        inits = self.chain_inits or DEFAULT_INITS
        init = inits[c % len(inits)]
        return ChainInit.parse(init) if isinstance(init, str) else init


# -- results ----------------------------------------------------------------

@dataclass
class ChainResult:
    z_sum: np.ndarray
    w_sum: Optional[np.ndarray]
    g_sum: Optional[np.ndarray]
    n_samples: int
    tau_sum: float
    tau_sq: float
    attempts: dict
    accepts: dict
    final_state: IndicatorState
    tau_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # bit codes of the thinned states (Z row-major, then W, then G); 0 when too wide
    state_codes: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    @property
    def z_bar(self):
        return self.z_sum / self.n_samples

    @property
    def tau_mean(self):
        return self.tau_sum / self.n_samples

    @property
    def tau_var(self):
        m = self.tau_mean
        return max(self.tau_sq / self.n_samples - m * m, 0.0)


@dataclass
class PosteriorSummary:
    z_bar: np.ndarray
    z_bar_per_chain: np.ndarray
    delta_z: np.ndarray
    tau_mean: float
    tau_var: float
    acceptance: dict
    w_bar: Optional[np.ndarray] = None
    w_bar_per_chain: Optional[np.ndarray] = None
    g_bar: Optional[np.ndarray] = None
    g_bar_per_chain: Optional[np.ndarray] = None
    delta_threshold: float = 0.05
    chains: list = field(default_factory=list, repr=False)

    @property
    def converged_fraction(self):
        """Share of entries whose across-chain range is below the threshold."""
        return float(np.mean(self.delta_z < self.delta_threshold))

    @property
    def converged(self):
        return self.converged_fraction >= 0.95


# -- Python-level proposal mechanics ----------------------------------------

def propose_tau(tau, bounds, rng):
    """Truncated-normal random walk on ``bounds``; returns (tau_new, log Q ratio)."""
    lo, hi = bounds
    if not lo < tau < hi:
        raise ValidationError(f"tau={tau} outside ({lo}, {hi})")
    sigma = (hi - lo) / 4.0
    fa, fb = norm.cdf((lo - tau) / sigma), norm.cdf((hi - tau) / sigma)
    while True:
        new = tau + sigma * norm.ppf(fa + rng.random() * (fb - fa))
        if lo < new < hi:
            break
    return float(new), tau_log_q_ratio(tau, new, bounds)


def tau_log_q_ratio(tau, new, bounds):
    lo, hi = bounds
    sigma = (hi - lo) / 4.0

    def log_mass(mu):
        return math.log(norm.cdf((hi - mu) / sigma) - norm.cdf((lo - mu) / sigma))

    return log_mass(tau) - log_mass(new)


def mh_accept(current_log_post, proposal_log_post, log_q_ratio, rng):
    """Metropolis-Hastings decision; a proposal at -inf is never accepted."""
    if proposal_log_post == -np.inf:
        return False
    log_r = proposal_log_post - current_log_post + log_q_ratio
    return bool(rng.random() < math.exp(min(log_r, 0.0)))


def _logq_jump(k, m, delta, pi_plus):
    if k == 0 or k == m:
        return -math.log(m)
    if delta == 1:
        return math.log(pi_plus / (m - k))
    return math.log((1.0 - pi_plus) / k)


def _delta_probs(can_m, can_0, can_p, config):
    w = np.array([config.pi_minus_star * can_m, config.pi_zero_star * can_0,
                  config.pi_plus_star * can_p], dtype=float)
    return w / w.sum()


def _bb_logpmf(s, m, a, b):
    return float(np.log(comb(m, s)) + betaln(a + s, b + m - s) - betaln(a, b))


def _upper_counts(spec, state, t):
    """(|G_t|, |G*_t|) for the across-sites layer of trait t."""
    sizes = spec.group_sizes
    G_t = state.G[:, t]
    return int(G_t.sum()), int(((G_t == 1) & (sizes > 1)).sum())


def propose_indicators(spec, state, rng, config=SamplerConfig()):
    """Draw one indicator proposal; returns (new_state, log Q(old|new) - log Q(new|old))."""
    Z = state.Z
    p, q = Z.shape
    new = state.copy()
    kind = spec.kind
    h = spec.hyper
    if kind in (PriorKind.BASIC, PriorKind.UNADJUSTED):
        t = int(rng.integers(q)) if q > 1 else 0
        col = Z[:, t]
        k = int(col.sum())
        delta = 1 if k == 0 else -1 if k == p else (1 if rng.random() < config.pi_plus else -1)
        pool = np.flatnonzero(col == (0 if delta == 1 else 1))
        v = int(pool[rng.integers(pool.size)])
        new.Z[v, t] = 1 if delta == 1 else 0
        return new, proposal_log_prob(spec, new, state, config) - proposal_log_prob(spec, state, new, config)

    if kind is PriorKind.ACROSS_TRAITS:
        a_nu, b_nu = h.nu_params(p)
        nW = int(state.W.sum())
        probs = _delta_probs(nW > 0, nW > 0, nW < p, config)
        delta = int(rng.choice([-1, 0, 1], p=probs))
        if delta == 0:
            v = int(rng.choice(np.flatnonzero(state.W == 1)))
            s = int(Z[v].sum())
            d2 = 1 if s == 0 else -1 if s == q else (1 if rng.random() < config.pi_plus else -1)
            t = int(rng.choice(np.flatnonzero(Z[v] == (0 if d2 == 1 else 1))))
            new.Z[v, t] = 1 if d2 == 1 else 0
        elif delta == -1:
            v = int(rng.choice(np.flatnonzero(state.W == 1)))
            new.W[v] = 0
            new.Z[v] = 0
        else:
            v = int(rng.choice(np.flatnonzero(state.W == 0)))
            s = _draw_bb(a_nu[v], b_nu[v], q, rng)
            new.W[v] = 1
            new.Z[v, rng.choice(q, size=s, replace=False)] = 1
        return new, proposal_log_prob(spec, new, state, config) - proposal_log_prob(spec, state, new, config)

    sizes = spec.group_sizes
    r = spec.n_groups
    a_ng, b_ng = h.nu_group_params(r)
    t = int(rng.integers(q)) if q > 1 else 0
    nG, nGs = _upper_counts(spec, state, t)
    probs = _delta_probs(nG > 0, nGs > 0, nG < r, config)
    delta = int(rng.choice([-1, 0, 1], p=probs))
    G_t = state.G[:, t]
    if delta == 0:
        g = int(rng.choice(np.flatnonzero((G_t == 1) & (sizes > 1))))
        members = np.flatnonzero(spec.groups == g)
        s = int(Z[members, t].sum())
        m = members.size
        d2 = 1 if s == 0 else -1 if s == m else (1 if rng.random() < config.pi_plus else -1)
        v = int(rng.choice(members[Z[members, t] == (0 if d2 == 1 else 1)]))
        new.Z[v, t] = 1 if d2 == 1 else 0
    elif delta == -1:
        g = int(rng.choice(np.flatnonzero(G_t == 1)))
        new.G[g, t] = 0
        new.Z[spec.groups == g, t] = 0
    else:
        g = int(rng.choice(np.flatnonzero(G_t == 0)))
        members = np.flatnonzero(spec.groups == g)
        new.G[g, t] = 1
        if members.size == 1:
            new.Z[members[0], t] = 1
        else:
            s = _draw_bb(a_ng[g], b_ng[g], members.size, rng)
            new.Z[rng.choice(members, size=s, replace=False), t] = 1
    return new, proposal_log_prob(spec, new, state, config) - proposal_log_prob(spec, state, new, config)


def _draw_bb(a, b, m, rng):
    pmf = np.exp([_bb_logpmf(s, m, a, b) for s in range(m + 1)])
    return int(rng.choice(m + 1, p=pmf / pmf.sum()))


def proposal_log_prob(spec, old, new, config=SamplerConfig()):
    """log Q(new | old) of the indicator proposal, or -inf if ``new`` is unreachable."""
    Zo, Zn = old.Z, new.Z
    p, q = Zo.shape
    diff = Zo != Zn
    kind = spec.kind
    h = spec.hyper
    if kind in (PriorKind.BASIC, PriorKind.UNADJUSTED):
        if diff.sum() != 1:
            return -np.inf
        v, t = map(int, np.argwhere(diff)[0])
        k = int(Zo[:, t].sum())
        delta = 1 if Zn[v, t] else -1
        return -math.log(q) + _logq_jump(k, p, delta, config.pi_plus)

    if kind is PriorKind.ACROSS_TRAITS:
        a_nu, b_nu = h.nu_params(p)
        nW = int(old.W.sum())
        pm, p0, pp = _delta_probs(nW > 0, nW > 0, nW < p, config)
        dW = np.flatnonzero(old.W != new.W)
        if dW.size == 0:
            if diff.sum() != 1:
                return -np.inf
            v, t = map(int, np.argwhere(diff)[0])
            if old.W[v] == 0:
                return -np.inf
            s = int(Zo[v].sum())
            delta = 1 if Zn[v, t] else -1
            return math.log(p0) - math.log(nW) + _logq_jump(s, q, delta, config.pi_plus)
        if dW.size != 1:
            return -np.inf
        v = int(dW[0])
        if np.any(np.delete(diff, v, axis=0)):
            return -np.inf
        if old.W[v] == 1:
            if np.any(Zn[v]):
                return -np.inf
            return math.log(pm) - math.log(nW)
        if np.any(Zo[v]):
            return -np.inf
        s = int(Zn[v].sum())
        return (math.log(pp) - math.log(p - nW)
                + _bb_logpmf(s, q, a_nu[v], b_nu[v]) - math.log(comb(q, s)))

    sizes = spec.group_sizes
    r = spec.n_groups
    a_ng, b_ng = h.nu_group_params(r)
    dG = np.argwhere(old.G != new.G)
    traits = set(np.flatnonzero(diff.any(axis=0)).tolist()) | set(dG[:, 1].tolist())
    if len(traits) != 1:
        return -np.inf
    t = traits.pop()
    nG, nGs = _upper_counts(spec, old, t)
    pm, p0, pp = _delta_probs(nG > 0, nGs > 0, nG < r, config)
    base = -math.log(q)
    if dG.shape[0] == 0:
        if diff[:, t].sum() != 1:
            return -np.inf
        v = int(np.flatnonzero(diff[:, t])[0])
        g = int(spec.groups[v])
        if old.G[g, t] == 0 or sizes[g] == 1:
            return -np.inf
        members = spec.groups == g
        s = int(Zo[members, t].sum())
        delta = 1 if Zn[v, t] else -1
        return base + math.log(p0) - math.log(nGs) + _logq_jump(s, int(sizes[g]), delta, config.pi_plus)
    if dG.shape[0] != 1:
        return -np.inf
    g = int(dG[0, 0])
    members = spec.groups == g
    if np.any(diff[~members, t]):
        return -np.inf
    if old.G[g, t] == 1:
        if np.any(Zn[members, t]):
            return -np.inf
        return base + math.log(pm) - math.log(nG)
    if np.any(Zo[members, t]):
        return -np.inf
    m = int(sizes[g])
    s = int(Zn[members, t].sum())
    if m == 1:
        return base + math.log(pp) - math.log(r - nG) if s == 1 else -np.inf
    return (base + math.log(pp) - math.log(r - nG)
            + _bb_logpmf(s, m, a_ng[g], b_ng[g]) - math.log(comb(m, s)))


# -- chains -----------------------------------------------------------------

def chain_rng(seed, chain_index):
    """Independent generator for chain ``chain_index`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chain_index,)))


def initial_indicators(init, data, hyper, kind=None, groups=None):
    """Starting Z for a chain rule, trimmed so the state has positive mass."""
    p, q, n = data.p, data.q, data.n
    Z = np.zeros((p, q), np.int8)
    if init.rule == "empty":
        return Z
    corr = np.abs(data.xty) / np.sqrt(np.outer(np.diag(data.gram), data.yty))
    gprior = hyper.covariance is Covariance.GPRIOR
    for t in range(q):
        order = np.argsort(-corr[:, t], kind="stable")
        want = p if init.rule == "full" else min(init.j, p)
        chosen = []
        for v in order:
            if len(chosen) >= want or (gprior and len(chosen) >= n - 1):
                break
            trial = chosen + [int(v)]
            try:
                trait_terms(data.gram, data.xty[:, t], data.yty[t], n,
                            np.array(trial), 1.0, hyper)
            except (SingularDesignError, InfeasibleModelError):
                continue
            chosen = trial
        Z[chosen, t] = 1
    return Z


def _kernel_inputs(spec, data):
    h = spec.hyper
    p = data.p
    a_nu, b_nu = h.nu_params(p)
    if spec.kind is PriorKind.ACROSS_SITES:
        groups = spec.groups
        if groups.shape != (p,):
            raise ValidationError("group map length differs from number of variants")
        sizes = spec.group_sizes.astype(np.int64)
        order = np.argsort(groups, kind="stable").astype(np.int64)
        start = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        a_ng, b_ng = h.nu_group_params(spec.n_groups)
    else:
        sizes = np.zeros(0, np.int64)
        order = np.zeros(0, np.int64)
        start = np.zeros(1, np.int64)
        a_ng = b_ng = np.zeros(0)
    return a_nu, b_nu, sizes, start, order, a_ng, b_ng


def run_chain(config, spec, data, chain_index, state=None):
    """One chain; returns running sums rather than stored samples."""
    h = spec.hyper
    if state is None:
        if config.fixed_tau is not None:
            tau = config.fixed_tau
        elif config.tau_init is not None:
            tau = config.tau_init
        else:
            tau = math.sqrt(h.tau_lo * h.tau_hi)
        Z = initial_indicators(config.init_for(chain_index), data, h)
        state = complete_state(spec, Z, tau)
    if config.fixed_tau is not None:
        state = IndicatorState(state.Z, config.fixed_tau, state.W, state.G)
    check_state(spec, state, data.p, data.q)
    if not h.tau_lo < state.tau < h.tau_hi:
        raise ValidationError(f"tau={state.tau} outside ({h.tau_lo}, {h.tau_hi})")
    a_nu, b_nu, sizes, start, order, a_ng, b_ng = _kernel_inputs(spec, data)
    Z = state.Z.astype(np.int64)
    W = (state.W if state.W is not None else np.zeros(0)).astype(np.int64)
    G = (state.G if state.G is not None else np.zeros((0, data.q))).astype(np.int64)
    rng = chain_rng(config.seed, chain_index)
    try:
        out = K.run_chain_kernel(
            data.gram, np.ascontiguousarray(data.xty.T), data.yty.astype(float), data.n,
            _KIND_CODE[spec.kind], K.GPRIOR if h.covariance is Covariance.GPRIOR else K.IDENTITY,
            h.alpha_rho, h.lambda_rho, h.tau_lo, h.tau_hi,
            h.a_omega, h.b_omega, h.a_w, h.b_w, a_nu, b_nu, h.a_g, h.b_g, a_ng, b_ng,
            sizes, start, order, Z, W, G, float(state.tau),
            config.pi_plus, config.pi_minus_star, config.pi_zero_star, config.pi_plus_star,
            config.burn_in, config.n_samples, config.fixed_tau is not None,
            config.update_indicators, config.thin, rng, config.debug)
    except ValueError as exc:
        raise InfeasibleModelError(str(exc)) from None
    except AssertionError as exc:
        raise InvalidStateError(f"chain state inconsistent: {exc}") from None
    z_acc, w_acc, g_acc, tau_sum, tau_sq, trace, codes, attempts, accepts, tau_end = out
    final = IndicatorState(Z, tau_end, W if state.W is not None else None,
                           G if state.G is not None else None)
    return ChainResult(
        z_sum=z_acc,
        w_sum=w_acc if spec.kind is PriorKind.ACROSS_TRAITS else None,
        g_sum=g_acc if spec.kind is PriorKind.ACROSS_SITES else None,
        n_samples=config.n_samples, tau_sum=tau_sum, tau_sq=tau_sq,
        attempts=dict(zip(K.MOVE_NAMES, attempts.tolist())),
        accepts=dict(zip(K.MOVE_NAMES, accepts.tolist())),
        final_state=final, tau_trace=trace, state_codes=codes)


def summarize(chains, delta_threshold=0.05):
    per = np.stack([c.z_bar for c in chains])
    z_bar = per.mean(axis=0)
    n_tot = sum(c.n_samples for c in chains)
    tau_mean = sum(c.tau_sum for c in chains) / n_tot
    tau_var = max(sum(c.tau_sq for c in chains) / n_tot - tau_mean**2, 0.0)
    acceptance = {}
    for name in K.MOVE_NAMES:
        att = sum(c.attempts[name] for c in chains)
        acc = sum(c.accepts[name] for c in chains)
        acceptance[name] = acc / att if att else float("nan")
    summary = PosteriorSummary(
        z_bar=z_bar, z_bar_per_chain=per, delta_z=per.max(axis=0) - per.min(axis=0),
        tau_mean=tau_mean, tau_var=tau_var, acceptance=acceptance,
        delta_threshold=delta_threshold, chains=list(chains))
    if chains[0].w_sum is not None:
        summary.w_bar_per_chain = np.stack([c.w_sum / c.n_samples for c in chains])
        summary.w_bar = summary.w_bar_per_chain.mean(axis=0)
    if chains[0].g_sum is not None:
        summary.g_bar_per_chain = np.stack([c.g_sum / c.n_samples for c in chains])
        summary.g_bar = summary.g_bar_per_chain.mean(axis=0)
    return summary


def run_ensemble(config, spec, data):
    """Run ``config.n_chains`` independent chains and pool them."""
    idx = range(config.n_chains)
    if config.n_workers > 1:
        with ThreadPoolExecutor(config.n_workers) as pool:
            chains = list(pool.map(lambda c: run_chain(config, spec, data, c), idx))
    else:
        chains = [run_chain(config, spec, data, c) for c in idx]
    return summarize(chains, config.delta_threshold)
