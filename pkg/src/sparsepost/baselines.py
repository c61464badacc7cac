"""Frequentist comparators: OLS t-tests with Benjamini-Hochberg, and the Lasso."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats

from . import _kernels as kern
from .errors import ConvergenceError, DimensionError, SingularDesignError, ValidationError


@dataclass
class PValueMatrix:
    values: np.ndarray
    mode: str
    dof: int


def _as_2d(Y):
    Y = np.asarray(Y, dtype=float)
    return Y[:, None] if Y.ndim == 1 else Y


def ols_pvalues(X, Y, mode="marginal"):
    """Two-sided t-test p-values for every (variant, trait) coefficient.

    Inputs are assumed centered, so no intercept column is fitted; its degree
    of freedom is still charged (n - 2 for marginal fits, n - p - 1 for the
    joint fit).
    """
    X = np.asarray(X, dtype=float)
    Y = _as_2d(Y)
    n, p = X.shape
    if Y.shape[0] != n:
        raise DimensionError("X and Y disagree on the number of subjects")
    if mode == "marginal":
        dof = n - 2
        if dof < 1:
            raise ValidationError("marginal tests need n > 2")
        xx = np.einsum("ij,ij->j", X, X)
        yy = np.einsum("ij,ij->j", Y, Y)
        r = (X.T @ Y) / np.sqrt(np.outer(xx, yy))
        r2 = np.clip(r * r, 0.0, 1.0)
        with np.errstate(divide="ignore"):
            tstat = np.sqrt(dof * r2 / (1.0 - r2))
        pv = 2.0 * stats.t.sf(tstat, dof)
    elif mode == "full":
        dof = n - p - 1
        if dof < 1:
            raise ValidationError(f"joint fit needs n > p + 1 (n={n}, p={p})")
        Q, R, piv = linalg.qr(X, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        bad = diag <= max(n, p) * np.finfo(float).eps * diag[0]
        if np.any(bad):
            col = int(piv[np.argmax(bad)])
            raise SingularDesignError(f"design is rank deficient at column {col}", pivot=col)
        coef_p = linalg.solve_triangular(R, Q.T @ Y)
        Rinv = linalg.solve_triangular(R, np.eye(p))
        var_unit = np.einsum("ij,ij->i", Rinv, Rinv)
        coef = np.empty_like(coef_p)
        coef[piv] = coef_p
        vdiag = np.empty(p)
        vdiag[piv] = var_unit
        resid = Y - X @ coef
        s2 = np.einsum("ij,ij->j", resid, resid) / dof
        tstat = np.abs(coef) / np.sqrt(np.outer(vdiag, s2))
        pv = 2.0 * stats.t.sf(tstat, dof)
    else:
        raise ValidationError(f"unknown mode {mode!r}")
    return PValueMatrix(np.clip(pv, 0.0, 1.0), mode, dof)


def bh_select(pvalues, alpha):
    """Benjamini-Hochberg step-up over all entries; returns a mask shaped like ``pvalues``."""
    if not 0.0 < alpha < 1.0:
        raise ValidationError("alpha must lie in (0, 1)")
    pv = np.asarray(getattr(pvalues, "values", pvalues), dtype=float)
    flat = pv.ravel()
    m = flat.size
    order = np.argsort(flat, kind="stable")
    ok = flat[order] <= alpha * np.arange(1, m + 1) / m
    mask = np.zeros(m, dtype=bool)
    if ok.any():
        k = np.flatnonzero(ok)[-1] + 1
        mask[order[:k]] = True
    return mask.reshape(pv.shape)


# -- Lasso ------------------------------------------------------------------

@dataclass
class LassoFit:
    lambdas: np.ndarray
    path: np.ndarray          # (n_lambda, p)
    cv_mean: np.ndarray
    cv_se: np.ndarray
    idx_min: int
    idx_1se: int
    rule: str
    seed: int

    @property
    def chosen(self):
        return self.idx_min if self.rule == "min" else self.idx_1se

    @property
    def coef(self):
        return self.path[self.chosen]

    @property
    def selected(self):
        return np.flatnonzero(self.coef != 0.0)

    @property
    def lambda_min(self):
        return float(self.lambdas[self.idx_min])

    @property
    def lambda_1se(self):
        return float(self.lambdas[self.idx_1se])


def lambda_grid(X, y, n_lambda=100, ratio=1e-3):
    n = X.shape[0]
    lam_max = float(np.max(np.abs(X.T @ y)) / n)
    if lam_max <= 0:
        lam_max = 1.0
    return np.geomspace(lam_max, ratio * lam_max, n_lambda)


def lasso_path(X, y, lambdas, tol=1e-10, max_sweeps=100_000):
    """Coefficient path of (1/2n)||y - Xb||^2 + lam ||b||_1 over a descending grid."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    n, p = X.shape
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(np.diff(lambdas) > 0):
        raise ValidationError("lambda grid must be descending")
    gram = X.T @ X / n
    xty = X.T @ y / n
    path, _, fail, change = kern.lasso_path_kernel(gram, xty, lambdas, tol, max_sweeps, np.zeros(p))
    if fail >= 0:
        raise ConvergenceError(
            f"coordinate descent did not converge at lambda={lambdas[fail]:.3g} "
            f"after {max_sweeps} sweeps", max_change=float(change))
    return path


def _canon_rule(rule):
    r = str(rule).lower().replace("-", "").replace("_", "")
    if r in ("min", "minerror"):
        return "min"
    if r in ("1se", "onese"):
        return "1se"
    raise ValidationError(f"unknown CV rule {rule!r}")


def lasso_select(X, y, lambdas=None, folds=10, rule="min", seed=0, tol=1e-10,
                 max_sweeps=100_000):
    """Lasso without intercept; penalty picked by K-fold CV (min error or one-SE rule)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    n = X.shape[0]
    rule = _canon_rule(rule)
    if folds < 2 or folds > n:
        raise ValidationError("folds must be between 2 and n")
    if lambdas is None:
        lambdas = lambda_grid(X, y)
    lambdas = np.asarray(lambdas, dtype=float)
    path = lasso_path(X, y, lambdas, tol, max_sweeps)
    rng = np.random.default_rng(seed)
    assign = rng.permutation(n) % folds
    err = np.empty((folds, lambdas.size))
    for f in range(folds):
        test = assign == f
        fp = lasso_path(X[~test], y[~test], lambdas, tol, max_sweeps)
        resid = y[test][:, None] - X[test] @ fp.T
        err[f] = np.mean(resid**2, axis=0)
    cv_mean = err.mean(axis=0)
    cv_se = err.std(axis=0, ddof=1) / np.sqrt(folds)
    i_min = int(np.argmin(cv_mean))
    ok = np.flatnonzero(cv_mean <= cv_mean[i_min] + cv_se[i_min])
    i_1se = int(ok.min())     # grid is descending: first index = largest lambda
    return LassoFit(lambdas, path, cv_mean, cv_se, i_min, i_1se, rule, seed)


def lasso_select_traits(X, Y, rule="min", folds=10, seed=0, **kw):
    """Per-trait Lasso selections as a (p, q) mask plus the individual fits."""
    Y = _as_2d(Y)
    fits = [lasso_select(X, Y[:, t], folds=folds, rule=rule, seed=seed + t, **kw)
            for t in range(Y.shape[1])]
    mask = np.stack([f.coef != 0.0 for f in fits], axis=1)
    return mask, fits
