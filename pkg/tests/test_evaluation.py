import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sparsepost.errors import DimensionError, ValidationError
from sparsepost.evaluation import (
    bfdr,
    bh_curve,
    default_xi_grid,
    fdp_power,
    performance_curve,
    power_at_fdr,
    score,
    select_by_bfdr,
    select_by_threshold,
)

zbars = arrays(np.float64, st.tuples(st.integers(1, 15), st.integers(1, 3)),
               elements=st.floats(0, 1))


def test_threshold_is_strict():
    rep = select_by_threshold(np.array([0.71, 0.69, 0.7]), 0.7)
    assert rep.selected.tolist() == [True, False, False]
    with pytest.raises(ValidationError):
        select_by_threshold(np.zeros(2), 1.0)


def test_bfdr_definition():
    z = np.array([0.9, 0.8, 0.95, 0.1])
    rep = select_by_threshold(z, 0.5)
    assert rep.bfdr == pytest.approx(0.11667, abs=1e-5)
    assert select_by_threshold(z, 0.99).bfdr is None
    assert bfdr(z, np.zeros(4, bool)) is None


def test_fdp_power_examples():
    truth = np.array([0, 1, 1, 0], bool)
    assert fdp_power(np.array([0, 1, 0, 1], bool), truth) == (0.5, 0.5)
    assert fdp_power(truth, truth) == (0.0, 1.0)
    assert fdp_power(np.zeros(4, bool), truth) == (0.0, 0.0)
    assert fdp_power(truth, np.zeros(4, bool))[1] is None
    with pytest.raises(DimensionError):
        fdp_power(np.zeros(3, bool), truth)
    rep = score(select_by_threshold(np.array([0.9, 0.8, 0.1, 0.95]), 0.5), truth)
    assert rep.fdp == pytest.approx(2 / 3) and rep.power == 0.5


def test_default_grid():
    g = default_xi_grid()
    assert g.size == 27 and np.all(np.diff(g) > 0)
    assert g[0] == pytest.approx(0.01) and g[-1] == pytest.approx(0.99)


def test_single_replicate_curve():
    rng = np.random.default_rng(0)
    z = rng.random((20, 3))
    truth = rng.random((20, 3)) < 0.3
    grid = default_xi_grid()
    curve = performance_curve([z], [truth], grid)
    for k, xi in enumerate(grid):
        f, p = fdp_power(z > xi, truth)
        assert curve.loc[k, "fdr"] == f and curve.loc[k, "power"] == p


def test_all_null_curve_drops_power():
    z = [np.array([0.8, 0.2]), np.array([0.1, 0.3])]
    truth = [np.zeros(2, bool)] * 2
    curve = performance_curve(z, truth, [0.5])
    assert "power" not in curve
    assert curve.loc[0, "fdr"] == 0.5


@settings(max_examples=50, deadline=None)
@given(z=zbars, a=st.floats(0.01, 0.98), b=st.floats(0.01, 0.98))
def test_selection_antitone_and_bfdr_bound(z, a, b):
    lo, hi = sorted((a, b))
    s_lo = select_by_threshold(z, lo)
    s_hi = select_by_threshold(z, hi)
    assert np.all(s_hi.selected <= s_lo.selected)
    if s_hi.bfdr is not None:
        assert s_hi.bfdr < 1 - hi


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_curves_are_monotone(seed):
    rng = np.random.default_rng(seed)
    truths = [rng.random((30, 2)) < 0.2 for _ in range(5)]
    truths[0][0, 0] = True
    z = [np.clip(t * 0.6 + rng.random(t.shape) * 0.5, 0, 1) for t in truths]
    curve = performance_curve(z, truths)
    assert np.all(np.diff(curve["power"]) <= 1e-15)
    # pooled FDP need not fall monotonically per replicate; the count of false picks does
    false_counts = [[int(((zz > xi) & ~t).sum()) for xi in default_xi_grid()] for zz, t in zip(z, truths)]
    assert np.all(np.diff(false_counts, axis=1) <= 0)


@settings(max_examples=50, deadline=None)
@given(z=zbars, target=st.floats(0.0, 0.5))
def test_bfdr_target_is_largest_prefix(z, target):
    rep = select_by_bfdr(z, target)
    if rep.n_selected:
        assert rep.bfdr <= target + 1e-12
        # everything selected ranks at least as high as anything left out
        if not rep.selected.all():
            assert z[rep.selected].min() >= z[~rep.selected].max()
    order = np.sort(z.ravel())[::-1]
    k = rep.n_selected
    if k < order.size:
        assert np.mean(1 - order[:k + 1]) > target - 1e-12


def test_bh_curve_and_power_at_fdr():
    rng = np.random.default_rng(2)
    truths, pvs = [], []
    for _ in range(4):
        t = np.zeros((40, 2), bool)
        t[:5] = True
        pv = rng.random((40, 2))
        pv[t] *= 1e-4
        truths.append(t)
        pvs.append(pv)
    curve = bh_curve(pvs, truths)
    assert list(curve.columns[:5]) == ["alpha", "fdr", "fdr_se", "power", "power_se"]
    power, idx = power_at_fdr(curve, 0.2)
    assert power == curve["power"][curve["fdr"] <= 0.2].max() and idx is not None
