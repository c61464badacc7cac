"""Prior masses and collapsed marginal likelihoods.

Everything here is a pure function of its inputs. Coefficients ``beta`` and
the error precision ``rho`` are integrated out analytically, so a model is
fully described by the binary indicator matrix ``Z`` (variants x traits),
an optional upper indicator layer (``W`` per variant or ``G`` per group and
trait) and the scale parameter ``tau``.

All densities are returned on the log scale and up to additive constants
that are shared by every state with the same data and hyperparameters.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import betaln

from .errors import (
    DegenerateTraitError,
    DimensionError,
    InfeasibleModelError,
    InvalidMoveError,
    InvalidStateError,
    OutOfSupportError,
    SingularDesignError,
    ValidationError,
)

PIVOT_TOL = 1e-10


class PriorKind(enum.Enum):
    BASIC = "basic"
    UNADJUSTED = "unadjusted"
    ACROSS_TRAITS = "across-traits"
    ACROSS_SITES = "across-sites"


class Covariance(enum.Enum):
    IDENTITY = "identity"
    GPRIOR = "gprior"


@dataclass(frozen=True)
class Hyperparameters:
    """Hyperparameters of the hierarchical priors.

    ``a_nu``/``b_nu`` are per-variant (scalar or length p) and
    ``a_nu_group``/``b_nu_group`` per-group (scalar or length r); scalars are
    broadcast when the prior is built against data.
    """

    alpha_rho: float = 10.0
    lambda_rho: float = 10.0
    tau_lo: float = 0.01
    tau_hi: float = 10.0
    a_omega: float = 1.0
    b_omega: float = 1.0
    a_w: float = 1.0
    b_w: float = 1.0
    a_nu: object = 1.0
    b_nu: object = 1.0
    a_g: float = 1.0
    b_g: float = 1.0
    a_nu_group: object = 1.0
    b_nu_group: object = 1.0
    covariance: Covariance = Covariance.GPRIOR

    def __post_init__(self):
        if isinstance(self.covariance, str):
            object.__setattr__(self, "covariance", Covariance(self.covariance))
        scalars = {
            "alpha_rho": self.alpha_rho, "lambda_rho": self.lambda_rho,
            "tau_lo": self.tau_lo, "tau_hi": self.tau_hi,
            "a_omega": self.a_omega, "b_omega": self.b_omega,
            "a_w": self.a_w, "b_w": self.b_w, "a_g": self.a_g, "b_g": self.b_g,
        }
        for name, value in scalars.items():
            if not np.isfinite(value) or value <= 0:
                raise ValidationError(f"hyperparameter {name} must be positive, got {value}")
        for name in ("a_nu", "b_nu", "a_nu_group", "b_nu_group"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if np.any(~np.isfinite(arr)) or np.any(arr <= 0):
                raise ValidationError(f"hyperparameter {name} must be positive")
        if not self.tau_lo < self.tau_hi:
            raise ValidationError("tau_lo must be smaller than tau_hi")

    def nu_params(self, p):
        return _broadcast(self.a_nu, p, "a_nu"), _broadcast(self.b_nu, p, "b_nu")

    def nu_group_params(self, r):
        return (_broadcast(self.a_nu_group, r, "a_nu_group"),
                _broadcast(self.b_nu_group, r, "b_nu_group"))

    def with_scaled_pairs(self, c):
        """Copy with every beta-prior pair (A, B) multiplied by ``c``."""
        return Hyperparameters(
            alpha_rho=self.alpha_rho, lambda_rho=self.lambda_rho,
            tau_lo=self.tau_lo, tau_hi=self.tau_hi,
            a_omega=c * self.a_omega, b_omega=c * self.b_omega,
            a_w=c * self.a_w, b_w=c * self.b_w,
            a_nu=c * np.asarray(self.a_nu, float), b_nu=c * np.asarray(self.b_nu, float),
            a_g=c * self.a_g, b_g=c * self.b_g,
            a_nu_group=c * np.asarray(self.a_nu_group, float),
            b_nu_group=c * np.asarray(self.b_nu_group, float),
            covariance=self.covariance,
        )


def _broadcast(value, size, name):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(size, float(arr))
    if arr.shape != (size,):
        raise DimensionError(f"{name} has shape {arr.shape}, expected ({size},)")
    return arr.copy()


@dataclass(frozen=True)
class PriorSpec:
    kind: PriorKind
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    groups: Optional[np.ndarray] = None

    def __post_init__(self):
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", PriorKind(self.kind))
        if self.kind is PriorKind.ACROSS_SITES:
            if self.groups is None:
                raise ValidationError("across-sites prior requires a group map")
            groups = np.asarray(self.groups)
            if groups.ndim != 1 or not np.issubdtype(groups.dtype, np.integer):
                raise ValidationError("group map must be a 1-d integer array")
            if groups.size and groups.min() < 0:
                raise ValidationError("group indices must be non-negative")
            r = int(groups.max()) + 1 if groups.size else 0
            if np.any(np.bincount(groups, minlength=r) == 0):
                raise ValidationError("every group index in 0..r-1 must be used")
            object.__setattr__(self, "groups", groups.astype(np.int64))
        elif self.groups is not None:
            object.__setattr__(self, "groups", np.asarray(self.groups, dtype=np.int64))

    @property
    def n_groups(self):
        return 0 if self.groups is None else int(self.groups.max()) + 1

    @property
    def group_sizes(self):
        return np.bincount(self.groups, minlength=self.n_groups)


@dataclass
class DataSet:
    """Design matrix and traits plus the sufficient statistics the model needs."""

    X: np.ndarray
    Y: np.ndarray
    variant_ids: Optional[list] = None
    trait_ids: Optional[list] = None

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=float)
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        self.Y = np.ascontiguousarray(Y)
        if self.X.ndim != 2 or self.X.shape[0] != self.Y.shape[0]:
            raise DimensionError(
                f"design {self.X.shape} and traits {self.Y.shape} disagree on subjects")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.Y))):
            raise ValidationError("design and traits must be finite")
        self.gram = self.X.T @ self.X
        self.xty = np.ascontiguousarray(self.X.T @ self.Y)
        self.yty = np.einsum("ij,ij->j", self.Y, self.Y)
        if np.any(self.yty <= 0):
            bad = np.flatnonzero(self.yty <= 0).tolist()
            raise DegenerateTraitError(f"trait(s) {bad} have zero sum of squares")
        if self.variant_ids is None:
            self.variant_ids = [f"v{i}" for i in range(self.p)]
        if self.trait_ids is None:
            self.trait_ids = [f"t{i}" for i in range(self.q)]

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def q(self):
        return self.Y.shape[1]

    @classmethod
    def standardized(cls, X, Y, **kwargs):
        """Center and scale every column of ``X`` and ``Y`` to unit sample SD."""
        return cls(_standardize(X), _standardize(Y), **kwargs)


def _standardize(A):
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    centered = A - A.mean(axis=0)
    sd = centered.std(axis=0, ddof=1)
    if np.any(sd == 0):
        raise DegenerateTraitError("cannot standardize a constant column")
    return centered / sd


@dataclass
class IndicatorState:
    Z: np.ndarray
    tau: float
    W: Optional[np.ndarray] = None
    G: Optional[np.ndarray] = None

    def __post_init__(self):
        Z = np.asarray(self.Z)
        if Z.ndim == 1:
            Z = Z[:, None]
        self.Z = Z.astype(np.int8)
        if self.W is not None:
            self.W = np.asarray(self.W).astype(np.int8)
        if self.G is not None:
            G = np.asarray(self.G)
            if G.ndim == 1:
                G = G[:, None]
            self.G = G.astype(np.int8)

    def copy(self):
        return IndicatorState(
            self.Z.copy(), self.tau,
            None if self.W is None else self.W.copy(),
            None if self.G is None else self.G.copy())


@dataclass
class ModelEvaluation:
    log_prior: float
    log_lik_per_trait: np.ndarray
    log_posterior: float
    s2: np.ndarray
    logdet_terms: np.ndarray


def empty_state(spec, p, q, tau):
    W = np.zeros(p, np.int8) if spec.kind is PriorKind.ACROSS_TRAITS else None
    G = np.zeros((spec.n_groups, q), np.int8) if spec.kind is PriorKind.ACROSS_SITES else None
    return IndicatorState(np.zeros((p, q), np.int8), tau, W, G)


def complete_state(spec, Z, tau):
    """Smallest consistent upper layer for a given ``Z``.

    ``W_v`` is on when row v has any active entry; ``G_gt`` is on when group g
    has an active variant for trait t.  Singleton groups stay consistent
    because their only variant decides the group.
    """
    Z = np.asarray(Z).astype(np.int8)
    if Z.ndim == 1:
        Z = Z[:, None]
    W = G = None
    if spec.kind is PriorKind.ACROSS_TRAITS:
        W = (Z.sum(axis=1) > 0).astype(np.int8)
    elif spec.kind is PriorKind.ACROSS_SITES:
        G = np.zeros((spec.n_groups, Z.shape[1]), np.int8)
        np.maximum.at(G, spec.groups, Z)
    return IndicatorState(Z, tau, W, G)


def check_state(spec, state, p=None, q=None):
    """Raise :class:`InvalidStateError` unless ``state`` is consistent with ``spec``."""
    Z = state.Z
    if p is not None and Z.shape != (p, q):
        raise InvalidStateError(f"Z has shape {Z.shape}, expected {(p, q)}")
    if np.any((Z != 0) & (Z != 1)):
        raise InvalidStateError("Z must be binary")
    kind = spec.kind
    if kind in (PriorKind.BASIC, PriorKind.UNADJUSTED):
        if state.W is not None or state.G is not None:
            raise InvalidStateError(f"{kind.value} prior has no upper indicator layer")
    elif kind is PriorKind.ACROSS_TRAITS:
        if state.W is None or state.W.shape != (Z.shape[0],):
            raise InvalidStateError("across-traits state needs W of length p")
        if state.G is not None:
            raise InvalidStateError("across-traits state has no G")
        if np.any(Z[state.W == 0] != 0):
            raise InvalidStateError("Z_vt must be 0 whenever W_v = 0")
    else:
        r = spec.n_groups
        if spec.groups.shape != (Z.shape[0],):
            raise InvalidStateError("group map length differs from number of variants")
        if state.G is None or state.G.shape != (r, Z.shape[1]):
            raise InvalidStateError(f"across-sites state needs G of shape {(r, Z.shape[1])}")
        if state.W is not None:
            raise InvalidStateError("across-sites state has no W")
        g_of_v = state.G[spec.groups]
        if np.any((g_of_v == 0) & (Z == 1)):
            raise InvalidStateError("Z_v must be 0 when its group is inactive")
        single = spec.group_sizes[spec.groups] == 1
        if np.any((g_of_v[single] == 1) & (Z[single] == 0)):
            raise InvalidStateError("singleton group active but its variant is not")


def _logbeta_ratio(a, b, k, m):
    """log B(a + k, b + m - k) - log B(a, b)."""
    return betaln(a + k, b + m - k) - betaln(a, b)


def log_prior_indicators(spec, state, check=True):
    """Log prior mass of the indicators, up to a constant shared by all states."""
    if check:
        check_state(spec, state)
    h = spec.hyper
    Z = state.Z
    p, q = Z.shape
    kind = spec.kind
    if kind is PriorKind.BASIC:
        return float(np.sum(_logbeta_ratio(h.a_omega, h.b_omega, Z.sum(axis=0), p)))
    if kind is PriorKind.UNADJUSTED:
        a, b = h.nu_params(p)
        return float(np.sum(_logbeta_ratio(a, b, Z.sum(axis=1), q)))
    if kind is PriorKind.ACROSS_TRAITS:
        a, b = h.nu_params(p)
        on = state.W == 1
        upper = _logbeta_ratio(h.a_w, h.b_w, int(on.sum()), p)
        return float(upper + np.sum(_logbeta_ratio(a[on], b[on], Z[on].sum(axis=1), q)))
    r = spec.n_groups
    sizes = spec.group_sizes
    a, b = h.nu_group_params(r)
    total = 0.0
    for t in range(q):
        G_t = state.G[:, t]
        s_g = np.bincount(spec.groups, weights=Z[:, t], minlength=r)
        total += _logbeta_ratio(h.a_g, h.b_g, int(G_t.sum()), r)
        on = (G_t == 1) & (sizes > 1)
        total += np.sum(_logbeta_ratio(a[on], b[on], s_g[on], sizes[on]))
    return float(total)


def _cholesky_checked(M, idx):
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise SingularDesignError(
            f"columns {list(map(int, idx))} are collinear", pivot=None) from None
    pivots = np.diag(L) ** 2
    rel = pivots / np.diag(M)
    if np.any(rel <= PIVOT_TOL):
        j = int(np.argmax(rel <= PIVOT_TOL))
        raise SingularDesignError(
            f"column {int(idx[j])} is (numerically) collinear with earlier columns",
            pivot=int(idx[j]))
    return L


def trait_terms(gram, xty_t, yty_t, n, idx, tau, hyper):
    """(log likelihood, S^2, determinant term) for one trait from sufficient statistics.

    ``idx`` lists the active variants.  The determinant term is the log of
    det(Omega)^(1/2) / (tau^|Z| det(Sigma)^(1/2)).
    """
    idx = np.asarray(idx, dtype=np.int64)
    k = idx.size
    a_rho, l_rho = hyper.alpha_rho, hyper.lambda_rho
    if k == 0:
        s2 = yty_t
        det_term = 0.0
    else:
        G = gram[np.ix_(idx, idx)]
        b = xty_t[idx]
        if hyper.covariance is Covariance.GPRIOR:
            if k >= n:
                raise InfeasibleModelError(f"g-prior needs |Z| < n, got |Z|={k}, n={n}")
            L = _cholesky_checked(G, idx)
            c = _solve_lower(L, b)
            ntau2 = n * tau * tau
            s2 = yty_t - ntau2 / (ntau2 + 1.0) * float(c @ c)
            det_term = -0.5 * k * np.log(ntau2 + 1.0)
        else:
            M = G + np.eye(k) / (tau * tau)
            L = _cholesky_checked(M, idx)
            c = _solve_lower(L, b)
            s2 = yty_t - float(c @ c)
            det_term = -np.sum(np.log(np.diag(L))) - k * np.log(tau)
    ll = -(0.5 * n + a_rho) * np.log(l_rho + 0.5 * s2) + det_term
    return float(ll), float(s2), float(det_term)


def _solve_lower(L, b):
    return solve_triangular(L, b, lower=True, check_finite=False)


def log_marginal_likelihood_trait(X, y, z_t, tau, hyper, method="closed"):
    """Collapsed log marginal likelihood of one trait given its indicators.

    ``method="closed"`` uses the Cholesky factor of the small Gram block (and
    the g-prior determinant simplification); ``method="dense"`` forms
    Sigma and Omega explicitly and takes their determinants, which is slower
    but shares no algebra with the closed path.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    z_t = np.asarray(z_t).ravel()
    if z_t.shape != (X.shape[1],):
        raise DimensionError("indicator vector length differs from number of columns")
    idx = np.flatnonzero(z_t)
    n = X.shape[0]
    if method == "dense":
        return _dense_log_lik(X[:, idx], y, tau, hyper, n)
    Xz = X[:, idx]
    return trait_terms(Xz.T @ Xz, Xz.T @ y, float(y @ y), n,
                       np.arange(idx.size), tau, hyper)[0]


def _dense_log_lik(Xz, y, tau, hyper, n):
    k = Xz.shape[1]
    yty = float(y @ y)
    if k == 0:
        return float(-(0.5 * n + hyper.alpha_rho) * np.log(hyper.lambda_rho + 0.5 * yty))
    XtX = Xz.T @ Xz
    if hyper.covariance is Covariance.GPRIOR:
        if k >= n:
            raise InfeasibleModelError(f"g-prior needs |Z| < n, got |Z|={k}, n={n}")
        if np.linalg.matrix_rank(XtX) < k:
            raise SingularDesignError("selected columns are collinear")
        Sigma = n * np.linalg.inv(XtX)
    else:
        Sigma = np.eye(k)
    Omega_inv = XtX + np.linalg.inv(Sigma) / tau**2
    Omega = np.linalg.inv(Omega_inv)
    Xty = Xz.T @ y
    s2 = yty - Xty @ Omega @ Xty
    _, logdet_omega = np.linalg.slogdet(Omega)
    _, logdet_sigma = np.linalg.slogdet(Sigma)
    return float(-(0.5 * n + hyper.alpha_rho) * np.log(hyper.lambda_rho + 0.5 * s2)
                 + 0.5 * logdet_omega - k * np.log(tau) - 0.5 * logdet_sigma)


def _check_tau(tau, hyper):
    if not hyper.tau_lo < tau < hyper.tau_hi:
        raise OutOfSupportError(
            f"tau={tau} outside the prior support ({hyper.tau_lo}, {hyper.tau_hi})")


def log_joint_posterior(spec, state, data):
    """Unnormalized log posterior of (indicators, tau) with everything else integrated out."""
    check_state(spec, state, data.p, data.q)
    _check_tau(state.tau, spec.hyper)
    log_prior = log_prior_indicators(spec, state, check=False)
    q = data.q
    ll = np.empty(q)
    s2 = np.empty(q)
    det = np.empty(q)
    for t in range(q):
        ll[t], s2[t], det[t] = trait_terms(
            data.gram, data.xty[:, t], data.yty[t], data.n,
            np.flatnonzero(state.Z[:, t]), state.tau, spec.hyper)
    return ModelEvaluation(log_prior, ll, float(log_prior + ll.sum()), s2, det)


def _flip_prior_delta(spec, state, v, t):
    h = spec.hyper
    Z = state.Z
    p, q = Z.shape
    old = int(Z[v, t])
    step = 1 - 2 * old
    kind = spec.kind
    if kind is PriorKind.BASIC:
        k = int(Z[:, t].sum())
        return float(_logbeta_ratio(h.a_omega, h.b_omega, k + step, p)
                     - _logbeta_ratio(h.a_omega, h.b_omega, k, p))
    if kind in (PriorKind.UNADJUSTED, PriorKind.ACROSS_TRAITS):
        if kind is PriorKind.ACROSS_TRAITS and state.W[v] == 0:
            raise InvalidMoveError(f"cannot flip Z[{v},{t}] while W[{v}] = 0")
        a, b = h.nu_params(p)
        s = int(Z[v].sum())
        return float(_logbeta_ratio(a[v], b[v], s + step, q) - _logbeta_ratio(a[v], b[v], s, q))
    g = int(spec.groups[v])
    size = int(spec.group_sizes[g])
    if state.G[g, t] == 0:
        raise InvalidMoveError(f"cannot flip Z[{v},{t}] while its group {g} is inactive")
    if size == 1:
        raise InvalidMoveError(f"variant {v} is alone in active group {g} and must stay on")
    a, b = h.nu_group_params(spec.n_groups)
    s = int(Z[spec.groups == g, t].sum())
    return float(_logbeta_ratio(a[g], b[g], s + step, size)
                 - _logbeta_ratio(a[g], b[g], s, size))


def flip_log_odds(spec, state, v, t, data):
    """log posterior(Z with Z_vt flipped) - log posterior(Z).

    Only trait ``t``'s likelihood and the prior terms touched by the flip are
    recomputed.
    """
    check_state(spec, state, data.p, data.q)
    _check_tau(state.tau, spec.hyper)
    dprior = _flip_prior_delta(spec, state, v, t)
    col = state.Z[:, t]
    idx = np.flatnonzero(col)
    if col[v]:
        new_idx = idx[idx != v]
    else:
        new_idx = np.sort(np.append(idx, v))
    args = (data.gram, data.xty[:, t], data.yty[t], data.n)
    old_ll = trait_terms(*args, idx, state.tau, spec.hyper)[0]
    new_ll = trait_terms(*args, new_idx, state.tau, spec.hyper)[0]
    return dprior + new_ll - old_ll


def flipped(state, v, t):
    new = state.copy()
    new.Z[v, t] = 1 - new.Z[v, t]
    return new
