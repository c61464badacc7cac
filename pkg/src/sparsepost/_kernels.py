"""Compiled inner loops: Cholesky append/downdate, the MCMC chain, subset
enumeration and coordinate-descent Lasso.

Integer codes shared with the Python wrappers are defined at the top.  All
kernels are ``nogil`` so callers may run independent chains or enumeration
partitions on threads.
"""

import math

import numpy as np
from numba import njit

PIVOT_TOL = 1e-10

BASIC, UNADJUSTED, ACROSS_TRAITS, ACROSS_SITES = 0, 1, 2, 3
GPRIOR, IDENTITY = 0, 1

MOVE_TAU, MOVE_ADD, MOVE_REMOVE, MOVE_WITHIN, MOVE_ACTIVATE, MOVE_DEACTIVATE = range(6)
MOVE_NAMES = ("tau", "add", "remove", "within", "activate", "deactivate")

_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)


# -- scalar helpers ---------------------------------------------------------

@njit(cache=True, nogil=True)
def logbeta(a, b):
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


@njit(cache=True, nogil=True)
def lb_ratio(a, b, k, m):
    """log B(a + k, b + m - k) - log B(a, b)."""
    return logbeta(a + k, b + m - k) - logbeta(a, b)


@njit(cache=True, nogil=True)
def norm_cdf(x):
    return 0.5 * math.erfc(-x / _SQRT2)


@njit(cache=True, nogil=True)
def _ppf_lower(u):
    # Acklam's rational approximation for u <= 1/2, then one Halley step
    plow = 0.02425
    if u < plow:
        t = math.sqrt(-2.0 * math.log(u))
        x = ((((((-7.784894002430293e-03 * t - 3.223964580411365e-01) * t
                 - 2.400758277161838e+00) * t - 2.549732539343734e+00) * t
               + 4.374664141464968e+00) * t + 2.938163982698783e+00)
             / ((((7.784695709041462e-03 * t + 3.224671290700398e-01) * t
                  + 2.445134137142996e+00) * t + 3.754408661907416e+00) * t + 1.0))
    else:
        s = u - 0.5
        t = s * s
        x = ((((((-3.969683028665376e+01 * t + 2.209460984245205e+02) * t
                 - 2.759285104469687e+02) * t + 1.383577518672690e+02) * t
               - 3.066479806614716e+01) * t + 2.506628277459239e+00) * s
             / (((((-5.447609879822406e+01 * t + 1.615858368580409e+02) * t
                   - 1.556989798598866e+02) * t + 6.680131188771972e+01) * t
                 - 1.328068155288572e+01) * t + 1.0))
    e = norm_cdf(x) - u
    d = e * _SQRT2PI * math.exp(0.5 * x * x)
    return x - d / (1.0 + 0.5 * x * d)


@njit(cache=True, nogil=True)
def norm_ppf(u):
    if u <= 0.0:
        return -np.inf
    if u >= 1.0:
        return np.inf
    if u > 0.5:
        # reflect so the correction step never subtracts numbers close to 1
        return -_ppf_lower(1.0 - u)
    return _ppf_lower(u)


@njit(cache=True, nogil=True)
def trunc_log_mass(mu, sigma, lo, hi):
    """log of the N(mu, sigma^2) probability of (lo, hi)."""
    return math.log(norm_cdf((hi - mu) / sigma) - norm_cdf((lo - mu) / sigma))


@njit(cache=True, nogil=True)
def propose_tau_kernel(tau, lo, hi, rng):
    sigma = (hi - lo) / 4.0
    fa = norm_cdf((lo - tau) / sigma)
    fb = norm_cdf((hi - tau) / sigma)
    while True:
        u = fa + rng.random() * (fb - fa)
        new = tau + sigma * norm_ppf(u)
        if lo < new < hi:
            break
    log_q_ratio = trunc_log_mass(tau, sigma, lo, hi) - trunc_log_mass(new, sigma, lo, hi)
    return new, log_q_ratio


@njit(cache=True, nogil=True)
def mh_accept_kernel(log_r, rng):
    return rng.random() < math.exp(min(log_r, 0.0))


@njit(cache=True, nogil=True)
def mhjump_logq(k, m, delta, pi_plus):
    """log Q of a single add (+1) / remove (-1) move among ``m`` slots with ``k`` on."""
    if k == 0 or k == m:
        return -math.log(m)
    if delta == 1:
        return math.log(pi_plus / (m - k))
    return math.log((1.0 - pi_plus) / k)


@njit(cache=True, nogil=True)
def delta_probs(can_minus, can_zero, can_plus, pm, p0, pp):
    a = pm if can_minus else 0.0
    b = p0 if can_zero else 0.0
    c = pp if can_plus else 0.0
    tot = a + b + c
    return a / tot, b / tot, c / tot


@njit(cache=True, nogil=True)
def draw_beta_binomial(a, b, m, rng):
    u = rng.random()
    acc = 0.0
    for s in range(m + 1):
        acc += math.exp(lb_ratio(a, b, s, m) + math.lgamma(m + 1.0)
                        - math.lgamma(s + 1.0) - math.lgamma(m - s + 1.0))
        if u < acc:
            return s
    return m


# -- Cholesky factor maintenance --------------------------------------------

@njit(cache=True, nogil=True)
def chol_append(L, c, act, k, gram, xty_t, v, ridge):
    """Append variant ``v`` as row ``k``; False if its pivot is (near) zero."""
    for i in range(k):
        s = gram[act[i], v]
        for j in range(i):
            s -= L[i, j] * L[k, j]
        L[k, i] = s / L[i, i]
    d0 = gram[v, v] + ridge
    d = d0
    for j in range(k):
        d -= L[k, j] * L[k, j]
    if not d > PIVOT_TOL * d0:
        return False
    lkk = math.sqrt(d)
    L[k, k] = lkk
    s = xty_t[v]
    for j in range(k):
        s -= L[k, j] * c[j]
    c[k] = s / lkk
    act[k] = v
    return True


@njit(cache=True, nogil=True)
def chol_remove(L, c, act, k, j):
    """Delete position ``j`` from a size-``k`` factor using Givens rotations."""
    for i in range(j, k - 1):
        for m in range(i + 2):
            L[i, m] = L[i + 1, m]
        act[i] = act[i + 1]
    for i in range(j, k - 1):
        a = L[i, i]
        b = L[i, i + 1]
        r = math.hypot(a, b)
        cs = a / r
        sn = b / r
        for m in range(i, k - 1):
            x = L[m, i]
            y = L[m, i + 1]
            L[m, i] = cs * x + sn * y
            L[m, i + 1] = -sn * x + cs * y
        x = c[i]
        y = c[i + 1]
        c[i] = cs * x + sn * y
        c[i + 1] = -sn * x + cs * y


@njit(cache=True, nogil=True)
def factor_stats(L, c, k):
    cn2 = 0.0
    ldm = 0.0
    for i in range(k):
        cn2 += c[i] * c[i]
        ldm += math.log(L[i, i])
    return cn2, 2.0 * ldm


@njit(cache=True, nogil=True)
def trait_loglik(k, cn2, ldm, n, yty, tau, cov, a_rho, l_rho):
    if cov == GPRIOR:
        ntau2 = n * tau * tau
        s2 = yty - ntau2 / (ntau2 + 1.0) * cn2
        det = -0.5 * k * math.log(ntau2 + 1.0)
    else:
        s2 = yty - cn2
        det = -0.5 * ldm - k * math.log(tau)
    arg = l_rho + 0.5 * s2
    if arg <= 0.0:
        return -np.inf
    return -(0.5 * n + a_rho) * math.log(arg) + det


@njit(cache=True, nogil=True)
def _begin(LL, CC, AA, KS, cur, t):
    s = cur[t]
    d = 1 - s
    k = KS[s, t]
    for i in range(k):
        for j in range(i + 1):
            LL[d, t, i, j] = LL[s, t, i, j]
        CC[d, t, i] = CC[s, t, i]
        AA[d, t, i] = AA[s, t, i]
    KS[d, t] = k


@njit(cache=True, nogil=True)
def _alt_add(LL, CC, AA, KS, cur, t, v, gram, xtyT, ridge, kmax):
    d = 1 - cur[t]
    k = KS[d, t]
    if k >= kmax:
        return False
    if chol_append(LL[d, t], CC[d, t], AA[d, t], k, gram, xtyT[t], v, ridge):
        KS[d, t] = k + 1
        return True
    return False


@njit(cache=True, nogil=True)
def _alt_remove(LL, CC, AA, KS, cur, t, v):
    d = 1 - cur[t]
    k = KS[d, t]
    for j in range(k):
        if AA[d, t, j] == v:
            chol_remove(LL[d, t], CC[d, t], AA[d, t], k, j)
            KS[d, t] = k - 1
            return
    raise AssertionError("variant missing from active set")


@njit(cache=True, nogil=True)
def _alt_loglik(LL, CC, KS, cur, t, n, yty, tau, cov, a_rho, l_rho):
    d = 1 - cur[t]
    k = KS[d, t]
    cn2, ldm = factor_stats(LL[d, t], CC[d, t], k)
    return trait_loglik(k, cn2, ldm, n, yty[t], tau, cov, a_rho, l_rho)


@njit(cache=True, nogil=True)
def _set_z(Z, z_acc, z_since, v, t, val, ns, sampling):
    if sampling:
        z_acc[v, t] += Z[v, t] * (ns - z_since[v, t])
        z_since[v, t] = ns
    Z[v, t] = val


@njit(cache=True, nogil=True)
def _set_w(W, w_acc, w_since, v, val, ns, sampling):
    if sampling:
        w_acc[v] += W[v] * (ns - w_since[v])
        w_since[v] = ns
    W[v] = val


@njit(cache=True, nogil=True)
def _nth_where_z(Z, t, want, nth):
    cnt = 0
    for v in range(Z.shape[0]):
        if Z[v, t] == want:
            if cnt == nth:
                return v
            cnt += 1
    return -1


@njit(cache=True, nogil=True)
def _nth_where_row(Z, v, want, nth):
    cnt = 0
    for t in range(Z.shape[1]):
        if Z[v, t] == want:
            if cnt == nth:
                return t
            cnt += 1
    return -1


@njit(cache=True, nogil=True)
def _nth_where_vec(x, want, nth):
    cnt = 0
    for i in range(x.shape[0]):
        if x[i] == want:
            if cnt == nth:
                return i
            cnt += 1
    return -1


@njit(cache=True, nogil=True)
def _nth_group(G, t, gsize, want, need_multi, nth):
    cnt = 0
    for g in range(G.shape[0]):
        if G[g, t] == want and (not need_multi or gsize[g] > 1):
            if cnt == nth:
                return g
            cnt += 1
    return -1


@njit(cache=True, nogil=True)
def _sample_subset(items, m, s, rng, out):
    """Uniform ``s``-subset of ``items[:m]`` written to ``out[:s]`` (partial shuffle)."""
    for i in range(m):
        out[i] = items[i]
    for i in range(s):
        j = i + rng.integers(0, m - i)
        tmp = out[i]
        out[i] = out[j]
        out[j] = tmp


# -- the chain --------------------------------------------------------------

@njit(cache=True)
def _state_code(Z, W, G):
    # row-major bits of Z, then W, then G
    code = 0
    b = 0
    for v in range(Z.shape[0]):
        for t in range(Z.shape[1]):
            code |= Z[v, t] << b
            b += 1
    for v in range(W.shape[0]):
        code |= W[v] << b
        b += 1
    for g in range(G.shape[0]):
        for t in range(G.shape[1]):
            code |= G[g, t] << b
            b += 1
    return code


@njit(cache=True, nogil=True)
def run_chain_kernel(gram, xtyT, yty, n, kind, cov, a_rho, l_rho, tau_lo, tau_hi,
                     a_om, b_om, a_w, b_w, a_nu, b_nu, a_gl, b_gl, a_ng, b_ng,
                     gsize, gstart, gmembers, Z, W, G, tau0,
                     pi_plus, pm_star, p0_star, pp_star,
                     n_burn, n_samples, fixed_tau, update_indicators, thin, rng, debug):
    p, q = Z.shape
    r = gsize.shape[0]
    if cov == GPRIOR:
        kmax = min(p, n - 1)
    else:
        kmax = p
    kmax = max(kmax, 1)
    LL = np.zeros((2, q, kmax, kmax))
    CC = np.zeros((2, q, kmax))
    AA = np.zeros((2, q, kmax), dtype=np.int64)
    KS = np.zeros((2, q), dtype=np.int64)
    cur = np.zeros(q, dtype=np.int64)
    tau = tau0
    ridge = 0.0 if cov == GPRIOR else 1.0 / (tau * tau)

    ll = np.zeros(q)
    for t in range(q):
        cur[t] = 1
        for v in range(p):
            if Z[v, t] == 1:
                if not _alt_add(LL, CC, AA, KS, cur, t, v, gram, xtyT, ridge, kmax):
                    raise ValueError("starting state has zero posterior mass")
        ll[t] = _alt_loglik(LL, CC, KS, cur, t, n, yty, tau, cov, a_rho, l_rho)
        cur[t] = 0

    s_row = np.zeros(p, dtype=np.int64)
    for v in range(p):
        for t in range(q):
            s_row[v] += Z[v, t]
    nW = 0
    if kind == ACROSS_TRAITS:
        for v in range(p):
            nW += W[v]
    s_grp = np.zeros((r, q), dtype=np.int64)
    nG = np.zeros(q, dtype=np.int64)
    nGs = np.zeros(q, dtype=np.int64)
    if kind == ACROSS_SITES:
        for t in range(q):
            for g in range(r):
                for i in range(gstart[g], gstart[g + 1]):
                    s_grp[g, t] += Z[gmembers[i], t]
                nG[t] += G[g, t]
                if G[g, t] == 1 and gsize[g] > 1:
                    nGs[t] += 1

    z_acc = np.zeros((p, q))
    z_since = np.zeros((p, q), dtype=np.int64)
    w_acc = np.zeros(W.shape[0])
    w_since = np.zeros(W.shape[0], dtype=np.int64)
    g_acc = np.zeros(G.shape)
    g_since = np.zeros(G.shape, dtype=np.int64)
    attempts = np.zeros(6, dtype=np.int64)
    accepts = np.zeros(6, dtype=np.int64)
    n_trace = (n_samples + thin - 1) // thin if thin > 0 else 0
    trace = np.zeros(n_trace)
    codes = np.zeros(n_trace, dtype=np.int64)
    n_bits = p * q + W.shape[0] + G.shape[0] * G.shape[1]
    tau_sum = 0.0
    tau_sq = 0.0
    ns = 0
    maxg = 1
    for g in range(r):
        maxg = max(maxg, gsize[g])
    scratch = np.zeros(max(q, maxg), dtype=np.int64)
    items = np.zeros(max(q, maxg), dtype=np.int64)
    touched = np.zeros(q, dtype=np.bool_)
    new_ll = np.zeros(q)

    for it in range(n_burn + n_samples):
        sampling = it >= n_burn

        # tau update
        if not fixed_tau:
            attempts[MOVE_TAU] += 1
            new_tau, lq = propose_tau_kernel(tau, tau_lo, tau_hi, rng)
            dll = 0.0
            if cov == GPRIOR:
                for t in range(q):
                    k = KS[cur[t], t]
                    cn2, _ = factor_stats(LL[cur[t], t], CC[cur[t], t], k)
                    new_ll[t] = trait_loglik(k, cn2, 0.0, n, yty[t], new_tau, cov, a_rho, l_rho)
                    dll += new_ll[t] - ll[t]
            else:
                new_ridge = 1.0 / (new_tau * new_tau)
                for t in range(q):
                    s = cur[t]
                    d = 1 - s
                    k = KS[s, t]
                    KS[d, t] = 0
                    for i in range(k):
                        AA[d, t, i] = AA[s, t, i]
                    for i in range(k):
                        chol_append(LL[d, t], CC[d, t], AA[d, t], i, gram, xtyT[t],
                                    AA[s, t, i], new_ridge)
                    KS[d, t] = k
                    new_ll[t] = _alt_loglik(LL, CC, KS, cur, t, n, yty, new_tau, cov,
                                            a_rho, l_rho)
                    dll += new_ll[t] - ll[t]
            if mh_accept_kernel(dll + lq, rng):
                accepts[MOVE_TAU] += 1
                tau = new_tau
                for t in range(q):
                    ll[t] = new_ll[t]
                if cov == IDENTITY:
                    ridge = 1.0 / (tau * tau)
                    for t in range(q):
                        cur[t] = 1 - cur[t]

        if update_indicators:
            for t in range(q):
                touched[t] = False
            move = -1
            ok = True
            dprior = 0.0
            lq = 0.0
            if kind == BASIC or kind == UNADJUSTED:
                t = rng.integers(0, q) if q > 1 else 0
                k = KS[cur[t], t]
                if k == 0:
                    delta = 1
                elif k == p:
                    delta = -1
                else:
                    delta = 1 if rng.random() < pi_plus else -1
                lq = mhjump_logq(k + delta, p, -delta, pi_plus) - mhjump_logq(k, p, delta, pi_plus)
                if delta == 1:
                    move = MOVE_ADD
                    v = _nth_where_z(Z, t, 0, rng.integers(0, p - k))
                else:
                    move = MOVE_REMOVE
                    v = AA[cur[t], t, rng.integers(0, k)]
                if kind == BASIC:
                    dprior = lb_ratio(a_om, b_om, k + delta, p) - lb_ratio(a_om, b_om, k, p)
                else:
                    sv = s_row[v]
                    dprior = lb_ratio(a_nu[v], b_nu[v], sv + delta, q) - lb_ratio(a_nu[v], b_nu[v], sv, q)
                _begin(LL, CC, AA, KS, cur, t)
                touched[t] = True
                if delta == 1:
                    ok = _alt_add(LL, CC, AA, KS, cur, t, v, gram, xtyT, ridge, kmax)
                else:
                    _alt_remove(LL, CC, AA, KS, cur, t, v)
                attempts[move] += 1
                if ok:
                    nl = _alt_loglik(LL, CC, KS, cur, t, n, yty, tau, cov, a_rho, l_rho)
                    if mh_accept_kernel(dprior + nl - ll[t] + lq, rng):
                        accepts[move] += 1
                        cur[t] = 1 - cur[t]
                        ll[t] = nl
                        _set_z(Z, z_acc, z_since, v, t, 1 if delta == 1 else 0, ns, sampling)
                        s_row[v] += delta

            elif kind == ACROSS_TRAITS:
                qm, q0, qp = delta_probs(nW > 0, nW > 0, nW < p, pm_star, p0_star, pp_star)
                u = rng.random()
                if u < qm:
                    delta = -1
                elif u < qm + q0:
                    delta = 0
                else:
                    delta = 1
                if delta == 0:
                    move = MOVE_WITHIN
                    v = _nth_where_vec(W, 1, rng.integers(0, nW))
                    sv = s_row[v]
                    if sv == 0:
                        d2 = 1
                    elif sv == q:
                        d2 = -1
                    else:
                        d2 = 1 if rng.random() < pi_plus else -1
                    lq = mhjump_logq(sv + d2, q, -d2, pi_plus) - mhjump_logq(sv, q, d2, pi_plus)
                    if d2 == 1:
                        t = _nth_where_row(Z, v, 0, rng.integers(0, q - sv))
                    else:
                        t = _nth_where_row(Z, v, 1, rng.integers(0, sv))
                    dprior = lb_ratio(a_nu[v], b_nu[v], sv + d2, q) - lb_ratio(a_nu[v], b_nu[v], sv, q)
                    _begin(LL, CC, AA, KS, cur, t)
                    touched[t] = True
                    if d2 == 1:
                        ok = _alt_add(LL, CC, AA, KS, cur, t, v, gram, xtyT, ridge, kmax)
                    else:
                        _alt_remove(LL, CC, AA, KS, cur, t, v)
                    attempts[move] += 1
                    if ok:
                        nl = _alt_loglik(LL, CC, KS, cur, t, n, yty, tau, cov, a_rho, l_rho)
                        if mh_accept_kernel(dprior + nl - ll[t] + lq, rng):
                            accepts[move] += 1
                            cur[t] = 1 - cur[t]
                            ll[t] = nl
                            _set_z(Z, z_acc, z_since, v, t, 1 if d2 == 1 else 0, ns, sampling)
                            s_row[v] += d2
                elif delta == -1:
                    move = MOVE_DEACTIVATE
                    v = _nth_where_vec(W, 1, rng.integers(0, nW))
                    sv = s_row[v]
                    log_q0 = lb_ratio(a_nu[v], b_nu[v], sv, q)
                    _, _, qp_rev = delta_probs(nW - 1 > 0, nW - 1 > 0, nW - 1 < p,
                                               pm_star, p0_star, pp_star)
                    lq = (math.log(qp_rev) - math.log(p - nW + 1) + log_q0) - (math.log(qm) - math.log(nW))
                    dprior = lb_ratio(a_w, b_w, nW - 1, p) - lb_ratio(a_w, b_w, nW, p) - log_q0
                    attempts[move] += 1
                    dll = 0.0
                    for t in range(q):
                        if Z[v, t] == 1:
                            _begin(LL, CC, AA, KS, cur, t)
                            touched[t] = True
                            _alt_remove(LL, CC, AA, KS, cur, t, v)
                            new_ll[t] = _alt_loglik(LL, CC, KS, cur, t, n, yty, tau, cov, a_rho, l_rho)
                            dll += new_ll[t] - ll[t]
                    if mh_accept_kernel(dprior + dll + lq, rng):
                        accepts[move] += 1
                        for t in range(q):
                            if touched[t]:
                                cur[t] = 1 - cur[t]
                                ll[t] = new_ll[t]
                                _set_z(Z, z_acc, z_since, v, t, 0, ns, sampling)
                        s_row[v] = 0
                        _set_w(W, w_acc, w_since, v, 0, ns, sampling)
                        nW -= 1
                else:
                    move = MOVE_ACTIVATE
                    v = _nth_where_vec(W, 0, rng.integers(0, p - nW))
                    sv = draw_beta_binomial(a_nu[v], b_nu[v], q, rng)
                    for t in range(q):
                        items[t] = t
                    _sample_subset(items, q, sv, rng, scratch)
                    log_q0 = lb_ratio(a_nu[v], b_nu[v], sv, q)
                    qm_rev, _, _ = delta_probs(nW + 1 > 0, nW + 1 > 0, nW + 1 < p,
                                               pm_star, p0_star, pp_star)
                    lq = (math.log(qm_rev) - math.log(nW + 1)) - (math.log(qp) - math.log(p - nW) + log_q0)
                    dprior = lb_ratio(a_w, b_w, nW + 1, p) - lb_ratio(a_w, b_w, nW, p) + log_q0
                    attempts[move] += 1
                    dll = 0.0
                    for i in range(sv):
                        t = scratch[i]
                        _begin(LL, CC, AA, KS, cur, t)
                        touched[t] = True
                        if not _alt_add(LL, CC, AA, KS, cur, t, v, gram, xtyT, ridge, kmax):
                            ok = False
                            break
                        new_ll[t] = _alt_loglik(LL, CC, KS, cur, t, n, yty, tau, cov, a_rho, l_rho)
                        dll += new_ll[t] - ll[t]
                    if ok and mh_accept_kernel(dprior + dll + lq, rng):
                        accepts[move] += 1
                        for t in range(q):
                            if touched[t]:
                                cur[t] = 1 - cur[t]
                                ll[t] = new_ll[t]
                                _set_z(Z, z_acc, z_since, v, t, 1, ns, sampling)
                        s_row[v] = sv
                        _set_w(W, w_acc, w_since, v, 1, ns, sampling)
                        nW += 1

            else:
                t = rng.integers(0, q) if q > 1 else 0
                ng = nG[t]
                ngs = nGs[t]
                qm, q0, qp = delta_probs(ng > 0, ngs > 0, ng < r, pm_star, p0_star, pp_star)
                u = rng.random()
                if u < qm:
                    delta = -1
                elif u < qm + q0:
                    delta = 0
                else:
                    delta = 1
                if delta == 0:
                    move = MOVE_WITHIN
                    g = _nth_group(G, t, gsize, 1, True, rng.integers(0, ngs))
                    m = gsize[g]
                    sg = s_grp[g, t]
                    if sg == 0:
                        d2 = 1
                    elif sg == m:
                        d2 = -1
                    else:
                        d2 = 1 if rng.random() < pi_plus else -1
                    lq = mhjump_logq(sg + d2, m, -d2, pi_plus) - mhjump_logq(sg, m, d2, pi_plus)
                    want = 0 if d2 == 1 else 1
                    nth = rng.integers(0, m - sg) if d2 == 1 else rng.integers(0, sg)
                    cnt = 0
                    v = -1
                    for i in range(gstart[g], gstart[g + 1]):
                        if Z[gmembers[i], t] == want:
                            if cnt == nth:
                                v = gmembers[i]
                                break
                            cnt += 1
                    dprior = lb_ratio(a_ng[g], b_ng[g], sg + d2, m) - lb_ratio(a_ng[g], b_ng[g], sg, m)
                    _begin(LL, CC, AA, KS, cur, t)
                    touched[t] = True
                    if d2 == 1:
                        ok = _alt_add(LL, CC, AA, KS, cur, t, v, gram, xtyT, ridge, kmax)
                    else:
                        _alt_remove(LL, CC, AA, KS, cur, t, v)
                    attempts[move] += 1
                    if ok:
                        nl = _alt_loglik(LL, CC, KS, cur, t, n, yty, tau, cov, a_rho, l_rho)
                        if mh_accept_kernel(dprior + nl - ll[t] + lq, rng):
                            accepts[move] += 1
                            cur[t] = 1 - cur[t]
                            ll[t] = nl
                            _set_z(Z, z_acc, z_since, v, t, 1 if d2 == 1 else 0, ns, sampling)
                            s_grp[g, t] += d2
                            s_row[v] += d2
                elif delta == -1:
                    move = MOVE_DEACTIVATE
                    g = _nth_group(G, t, gsize, 1, False, rng.integers(0, ng))
                    m = gsize[g]
                    sg = s_grp[g, t]
                    multi = 1 if m > 1 else 0
                    log_q0 = lb_ratio(a_ng[g], b_ng[g], sg, m) if multi else 0.0
                    _, _, qp_rev = delta_probs(ng - 1 > 0, ngs - multi > 0, ng - 1 < r,
                                               pm_star, p0_star, pp_star)
                    lq = (math.log(qp_rev) - math.log(r - ng + 1) + log_q0) - (math.log(qm) - math.log(ng))
                    dprior = lb_ratio(a_gl, b_gl, ng - 1, r) - lb_ratio(a_gl, b_gl, ng, r) - log_q0
                    attempts[move] += 1
                    nl = ll[t]
                    if sg > 0:
                        _begin(LL, CC, AA, KS, cur, t)
                        touched[t] = True
                        for i in range(gstart[g], gstart[g + 1]):
                            if Z[gmembers[i], t] == 1:
                                _alt_remove(LL, CC, AA, KS, cur, t, gmembers[i])
                        nl = _alt_loglik(LL, CC, KS, cur, t, n, yty, tau, cov, a_rho, l_rho)
                    if mh_accept_kernel(dprior + nl - ll[t] + lq, rng):
                        accepts[move] += 1
                        if touched[t]:
                            cur[t] = 1 - cur[t]
                        ll[t] = nl
                        for i in range(gstart[g], gstart[g + 1]):
                            v = gmembers[i]
                            if Z[v, t] == 1:
                                _set_z(Z, z_acc, z_since, v, t, 0, ns, sampling)
                                s_row[v] -= 1
                        s_grp[g, t] = 0
                        if sampling:
                            g_acc[g, t] += G[g, t] * (ns - g_since[g, t])
                            g_since[g, t] = ns
                        G[g, t] = 0
                        nG[t] -= 1
                        nGs[t] -= multi
                else:
                    move = MOVE_ACTIVATE
                    g = _nth_group(G, t, gsize, 0, False, rng.integers(0, r - ng))
                    m = gsize[g]
                    multi = 1 if m > 1 else 0
                    b0 = gstart[g]
                    for i in range(m):
                        items[i] = gmembers[b0 + i]
                    if multi:
                        sg = draw_beta_binomial(a_ng[g], b_ng[g], m, rng)
                        _sample_subset(items, m, sg, rng, scratch)
                        log_q0 = lb_ratio(a_ng[g], b_ng[g], sg, m)
                    else:
                        sg = 1
                        scratch[0] = items[0]
                        log_q0 = 0.0
                    qm_rev, _, _ = delta_probs(ng + 1 > 0, ngs + multi > 0, ng + 1 < r,
                                               pm_star, p0_star, pp_star)
                    lq = (math.log(qm_rev) - math.log(ng + 1)) - (math.log(qp) - math.log(r - ng) + log_q0)
                    dprior = lb_ratio(a_gl, b_gl, ng + 1, r) - lb_ratio(a_gl, b_gl, ng, r) + log_q0
                    attempts[move] += 1
                    nl = ll[t]
                    if sg > 0:
                        _begin(LL, CC, AA, KS, cur, t)
                        touched[t] = True
                        for i in range(sg):
                            if not _alt_add(LL, CC, AA, KS, cur, t, scratch[i], gram, xtyT, ridge, kmax):
                                ok = False
                                break
                        if ok:
                            nl = _alt_loglik(LL, CC, KS, cur, t, n, yty, tau, cov, a_rho, l_rho)
                    if ok and mh_accept_kernel(dprior + nl - ll[t] + lq, rng):
                        accepts[move] += 1
                        if touched[t]:
                            cur[t] = 1 - cur[t]
                        ll[t] = nl
                        for i in range(sg):
                            v = scratch[i]
                            _set_z(Z, z_acc, z_since, v, t, 1, ns, sampling)
                            s_row[v] += 1
                        s_grp[g, t] = sg
                        if sampling:
                            g_acc[g, t] += G[g, t] * (ns - g_since[g, t])
                            g_since[g, t] = ns
                        G[g, t] = 1
                        nG[t] += 1
                        nGs[t] += multi

        if sampling:
            if thin > 0 and ns % thin == 0:
                trace[ns // thin] = tau
                if n_bits <= 62:
                    codes[ns // thin] = _state_code(Z, W, G)
            ns += 1
            tau_sum += tau
            tau_sq += tau * tau

        if debug:
            _check_consistency(Z, W, G, kind, gsize, gstart, gmembers, KS, AA, cur,
                               s_row, nW, nG, nGs, s_grp)

    for v in range(p):
        for t in range(q):
            z_acc[v, t] += Z[v, t] * (ns - z_since[v, t])
    for v in range(W.shape[0]):
        w_acc[v] += W[v] * (ns - w_since[v])
    for g in range(G.shape[0]):
        for t in range(G.shape[1]):
            g_acc[g, t] += G[g, t] * (ns - g_since[g, t])
    return z_acc, w_acc, g_acc, tau_sum, tau_sq, trace, codes, attempts, accepts, tau


@njit(cache=True, nogil=True)
def _check_consistency(Z, W, G, kind, gsize, gstart, gmembers, KS, AA, cur,
                       s_row, nW, nG, nGs, s_grp):
    p, q = Z.shape
    for t in range(q):
        k = 0
        for v in range(p):
            k += Z[v, t]
        if k != KS[cur[t], t]:
            raise AssertionError("factor size differs from |Z_t|")
        for i in range(k):
            if Z[AA[cur[t], t, i], t] != 1:
                raise AssertionError("factor holds an inactive variant")
    for v in range(p):
        s = 0
        for t in range(q):
            s += Z[v, t]
        if s != s_row[v]:
            raise AssertionError("row count out of sync")
    if kind == ACROSS_TRAITS:
        cnt = 0
        for v in range(p):
            cnt += W[v]
            if W[v] == 0 and s_row[v] != 0:
                raise AssertionError("Z row active while W_v = 0")
        if cnt != nW:
            raise AssertionError("|W| out of sync")
    if kind == ACROSS_SITES:
        for t in range(q):
            cg = 0
            cgs = 0
            for g in range(G.shape[0]):
                cg += G[g, t]
                if G[g, t] == 1 and gsize[g] > 1:
                    cgs += 1
                s = 0
                for i in range(gstart[g], gstart[g + 1]):
                    s += Z[gmembers[i], t]
                if s != s_grp[g, t]:
                    raise AssertionError("group count out of sync")
                if G[g, t] == 0 and s != 0:
                    raise AssertionError("Z active inside inactive group")
                if G[g, t] == 1 and gsize[g] == 1 and s != 1:
                    raise AssertionError("active singleton group without its variant")
            if cg != nG[t] or cgs != nGs[t]:
                raise AssertionError("|G| out of sync")


# -- exhaustive enumeration -------------------------------------------------

@njit(cache=True, nogil=True)
def enumerate_kernel(gram, xty_t, yty, n, cov, a_rho, l_rho, tau, a_om, b_om,
                     max_size, lead_lo, lead_hi, members, sizes, logpost):
    """Depth-first walk over subsets whose smallest index lies in [lead_lo, lead_hi).

    Subsets are visited in lexicographic order; every child appends one
    variant to its parent's factor, so each visit costs O(|Z|^2).  Subtrees
    below a numerically singular subset are skipped (all supersets are
    singular too).  Returns the number of rows written.
    """
    p = gram.shape[0]
    D = max_size
    ridge = 0.0 if cov == GPRIOR else 1.0 / (tau * tau)
    L = np.zeros((D, D))
    c = np.zeros(D)
    act = np.zeros(D, dtype=np.int64)
    cand = np.zeros(D + 1, dtype=np.int64)
    out = 0
    depth = 0
    cand[0] = lead_lo
    while True:
        v = cand[depth]
        limit = lead_hi if depth == 0 else p
        if v >= limit:
            if depth == 0:
                break
            depth -= 1
            cand[depth] += 1
            continue
        if chol_append(L, c, act, depth, gram, xty_t, v, ridge):
            k = depth + 1
            cn2, ldm = factor_stats(L, c, k)
            for i in range(k):
                members[out, i] = act[i]
            for i in range(k, members.shape[1]):
                members[out, i] = -1
            sizes[out] = k
            logpost[out] = (trait_loglik(k, cn2, ldm, n, yty, tau, cov, a_rho, l_rho)
                            + lb_ratio(a_om, b_om, k, p))
            out += 1
            if k < D:
                depth += 1
                cand[depth] = v + 1
                continue
        cand[depth] += 1
    return out


# -- coordinate-descent Lasso -----------------------------------------------

@njit(cache=True, nogil=True)
def _polish_active_set(gram_n, xty_n, lam, beta, grad, tol):
    """Solve the stationarity equations on the current support and signs.

    Accepted (beta and grad updated in place) only when the signs survive and
    every inactive gradient stays within lam; otherwise nothing changes.
    Covers the slow linear convergence of coordinate descent on
    ill-conditioned supports.
    """
    p = beta.shape[0]
    act = np.flatnonzero(beta)
    m = act.shape[0]
    if m == 0:
        return False
    A = np.empty((m, m))
    rhs = np.empty(m)
    for a in range(m):
        rhs[a] = xty_n[act[a]] - lam * np.sign(beta[act[a]])
        for b in range(m):
            A[a, b] = gram_n[act[a], act[b]]
    if np.linalg.cond(A) > 1e12:
        return False
    sol = np.linalg.solve(A, rhs)
    for a in range(m):
        if np.sign(sol[a]) != np.sign(beta[act[a]]):
            return False
    cand = np.zeros(p)
    for a in range(m):
        cand[act[a]] = sol[a]
    g = xty_n - gram_n @ cand
    for j in range(p):
        if cand[j] == 0.0 and abs(g[j]) > lam * (1.0 + 1e-12) + tol:
            return False
    beta[:] = cand
    grad[:] = g
    return True


@njit(cache=True, nogil=True)
def lasso_path_kernel(gram_n, xty_n, lambdas, tol, max_sweeps, beta0):
    """Cyclic coordinate descent on (1/2n)||y - X b||^2 + lam ||b||_1 with warm starts.

    Works on the scaled Gram matrix X'X/n and X'y/n.  Returns the path, the
    sweep counts and, on failure, the index of the non-converged lambda
    (else -1) together with its last maximum coordinate change.
    """
    p = gram_n.shape[0]
    nl = lambdas.shape[0]
    beta = beta0.copy()
    grad = xty_n.copy()
    for j in range(p):
        if beta[j] != 0.0:
            for i in range(p):
                grad[i] -= gram_n[i, j] * beta[j]
    path = np.zeros((nl, p))
    sweeps = np.zeros(nl, dtype=np.int64)
    for li in range(nl):
        lam = lambdas[li]
        maxd = 0.0
        converged = False
        for sweep in range(max_sweeps):
            maxd = 0.0
            for j in range(p):
                djj = gram_n[j, j]
                if djj <= 0.0:
                    continue
                bj = beta[j]
                zj = grad[j] + djj * bj
                if zj > lam:
                    new = (zj - lam) / djj
                elif zj < -lam:
                    new = (zj + lam) / djj
                else:
                    new = 0.0
                if new != bj:
                    d = new - bj
                    for i in range(p):
                        grad[i] -= gram_n[i, j] * d
                    beta[j] = new
                    ad = abs(d) * math.sqrt(djj)
                    if ad > maxd:
                        maxd = ad
            sweeps[li] = sweep + 1
            if maxd < tol:
                converged = True
                break
            if sweep % 20 == 19 and _polish_active_set(gram_n, xty_n, lam, beta, grad, tol):
                converged = True
                break
        if not converged:
            return path, sweeps, li, maxd
        path[li] = beta
    return path, sweeps, -1, 0.0
