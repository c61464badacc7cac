"""Brute-force references shared by the test modules."""

import itertools

import numpy as np

from sparsepost.model import IndicatorState, PriorKind, check_state, log_joint_posterior
from sparsepost.errors import InvalidStateError

# criterion number -> (passed, one-line detail); filled by test_acceptance
ACCEPTANCE = {}


def record(key, ok, detail):
    ACCEPTANCE[key] = (bool(ok), detail)
    print(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def small_data(n=60, p=4, q=2, seed=1, signal=((0, 0, 0.5), (2, 1, 0.4), (0, 1, 0.3))):
    from sparsepost.model import DataSet
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    if p > 1:
        X[:, 1] += 0.6 * X[:, 0]
    B = np.zeros((p, q))
    for v, t, b in signal:
        if v < p and t < q:
            B[v, t] = b
    Y = X @ B + rng.standard_normal((n, q))
    return DataSet.standardized(X, Y)


def all_states(spec, p, q, tau):
    """Every consistent indicator state for a small problem."""
    kind = spec.kind
    r = spec.n_groups
    for zbits in itertools.product((0, 1), repeat=p * q):
        Z = np.array(zbits, dtype=np.int8).reshape(p, q)
        if kind is PriorKind.ACROSS_TRAITS:
            uppers = [(np.array(w, np.int8), None) for w in itertools.product((0, 1), repeat=p)]
        elif kind is PriorKind.ACROSS_SITES:
            uppers = [(None, np.array(g, np.int8).reshape(r, q))
                      for g in itertools.product((0, 1), repeat=r * q)]
        else:
            uppers = [(None, None)]
        for W, G in uppers:
            st = IndicatorState(Z, tau, W, G)
            try:
                check_state(spec, st)
            except InvalidStateError:
                continue
            yield st


def state_code(state):
    bits = list(state.Z.ravel())
    if state.W is not None:
        bits += list(state.W)
    if state.G is not None:
        bits += list(state.G.ravel())
    return sum(int(b) << i for i, b in enumerate(bits))


def exact_distribution(spec, data, tau):
    """(states, probabilities) over the full consistent state space."""
    states = list(all_states(spec, data.p, data.q, tau))
    lp = np.array([log_joint_posterior(spec, s, data).log_posterior for s in states])
    w = np.exp(lp - lp.max())
    return states, w / w.sum()


def exact_zbar(spec, data, tau):
    states, prob = exact_distribution(spec, data, tau)
    return sum(w * s.Z for w, s in zip(prob, states))


def brute_bh(p, alpha):
    """Step-up rule written out directly."""
    flat = np.asarray(p, float).ravel()
    m = flat.size
    srt = np.sort(flat)
    k = 0
    for i in range(m, 0, -1):
        if srt[i - 1] <= i * alpha / m:
            k = i
            break
    if k == 0:
        return np.zeros_like(np.asarray(p), dtype=bool)
    cut = srt[k - 1]
    return np.asarray(p) <= cut
