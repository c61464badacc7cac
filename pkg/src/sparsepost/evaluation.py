"""Selection rules, Bayesian FDR, FDP/power scoring and performance curves."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from .errors import DimensionError, ValidationError


def default_xi_grid():
    """0.01l, 1 - 0.01l and 0.1l for l = 1..9, sorted (27 points)."""
    ell = np.arange(1, 10)
    return np.sort(np.concatenate([0.01 * ell, 1 - 0.01 * ell, 0.1 * ell]))


DEFAULT_ALPHA_GRID = np.array([0.001, 0.005, 0.01, 0.05, 0.1, 0.3, 0.5])


@dataclass
class SelectionReport:
    selected: np.ndarray            # boolean mask, shape of z_bar
    threshold: Optional[float] = None
    bfdr: Optional[float] = None
    fdp: Optional[float] = None
    power: Optional[float] = None

    @property
    def pairs(self):
        return [tuple(map(int, ix)) for ix in np.argwhere(np.atleast_2d(self.selected.T).T)]

    @property
    def n_selected(self):
        return int(self.selected.sum())


def _zbar(summary):
    z = getattr(summary, "z_bar", summary)
    return np.asarray(z, dtype=float)


def bfdr(z_bar, mask):
    z = np.asarray(z_bar, float)[mask]
    return float(np.mean(1.0 - z)) if z.size else None


def select_by_threshold(summary, xi):
    """Entries with z_bar strictly above ``xi``."""
    if not 0.0 < xi < 1.0:
        raise ValidationError("xi must lie in (0, 1)")
    z = _zbar(summary)
    mask = z > xi
    return SelectionReport(mask, float(xi), bfdr(z, mask))


def select_by_bfdr(summary, target):
    """Largest top-ranked set whose mean (1 - z_bar) stays within ``target``."""
    z = _zbar(summary)
    flat = z.ravel()
    order = np.argsort(-flat, kind="stable")
    running = np.cumsum(1.0 - flat[order]) / np.arange(1, flat.size + 1)
    ok = np.flatnonzero(running <= target + 1e-15)
    mask = np.zeros(flat.size, dtype=bool)
    if ok.size:
        mask[order[:ok[-1] + 1]] = True
    mask = mask.reshape(z.shape)
    return SelectionReport(mask, float(target), bfdr(z, mask))


def fdp_power(selection, truth):
    """(fdp, power) pooled over all traits; power is None when nothing is causal."""
    sel = np.asarray(getattr(selection, "selected", selection), dtype=bool)
    true = np.asarray(getattr(truth, "Z_true", truth), dtype=bool)
    if sel.shape != true.shape:
        raise DimensionError(f"selection {sel.shape} and truth {true.shape} differ")
    n_sel = int(sel.sum())
    fdp = float((sel & ~true).sum() / max(n_sel, 1))
    n_true = int(true.sum())
    power = float((sel & true).sum() / n_true) if n_true else None
    return fdp, power


def score(selection, truth):
    selection.fdp, selection.power = fdp_power(selection, truth)
    return selection


def performance_curve(z_bars, truths, xi_grid=None):
    """Mean FDP and power across replicates for each threshold in ``xi_grid``."""
    xi_grid = default_xi_grid() if xi_grid is None else np.asarray(xi_grid, float)
    masks = [[_zbar(z) > xi for xi in xi_grid] for z in z_bars]
    return _curve(masks, truths, xi_grid, "xi")


def bh_curve(pvalue_sets, truths, alpha_grid=DEFAULT_ALPHA_GRID):
    from .baselines import bh_select
    masks = [[bh_select(pv, a) for a in alpha_grid] for pv in pvalue_sets]
    return _curve(masks, truths, np.asarray(alpha_grid, float), "alpha")


def _curve(masks, truths, grid, name):
    if not masks:
        raise ValidationError("need at least one replicate")
    fdp = np.empty((len(masks), grid.size))
    power = np.full((len(masks), grid.size), np.nan)
    for r, (ms, truth) in enumerate(zip(masks, truths)):
        for k, m in enumerate(ms):
            f, pw = fdp_power(m, truth)
            fdp[r, k] = f
            if pw is not None:
                power[r, k] = pw
    out = pd.DataFrame({name: grid, "fdr": fdp.mean(axis=0),
                        "fdr_se": fdp.std(axis=0, ddof=1) / np.sqrt(len(masks)) if len(masks) > 1 else 0.0})
    if not np.all(np.isnan(power)):
        out["power"] = np.nanmean(power, axis=0)
        out["power_se"] = (np.nanstd(power, axis=0, ddof=1) / np.sqrt(len(masks))
                           if len(masks) > 1 else 0.0)
    out.attrs["fdp"] = fdp
    out.attrs["power"] = power
    return out


def power_at_fdr(curve, max_fdr=0.2):
    """Best mean power among grid points whose mean FDR is within ``max_fdr``."""
    ok = curve[curve["fdr"] <= max_fdr]
    if ok.empty or "power" not in ok:
        return 0.0, None
    i = ok["power"].idxmax()
    return float(ok.loc[i, "power"]), i
