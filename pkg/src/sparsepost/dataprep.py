"""Genotype preparation: imputation, standardization, covariate projection,
correlation pruning, duplicate collapsing and rare-variant grouping.

Genotypes are subjects x variants allele counts with ``NaN`` for missing
calls.  Variant metadata is a :class:`pandas.DataFrame` with (a subset of)
the columns ``variant_id, chromosome, position, gene, consequence, maf,
priority``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ConstantVariantError, DimensionError, SingularCovariateError, ValidationError

META_COLUMNS = ["variant_id", "chromosome", "position", "gene", "consequence", "maf", "priority"]

# higher = more severe; anything unlisted counts as 0
SEVERITY = {
    "nonsense": 4,
    "stop_gained": 4,
    "missense_probably_damaging": 3,
    "missense-probably-damaging": 3,
    "missense_possibly_damaging": 2,
    "missense-possibly-damaging": 2,
    "missense": 1,
}
NONSYNONYMOUS = {k for k, v in SEVERITY.items() if v > 0}


def severity(consequence):
    if consequence is None or (isinstance(consequence, float) and np.isnan(consequence)):
        return 0
    return SEVERITY.get(str(consequence).strip().lower(), 0)


def minor_allele_frequency(G):
    """MAF from allele counts, ignoring missing calls."""
    G = np.asarray(G, dtype=float)
    freq = np.nanmean(G, axis=0) / 2.0
    return np.minimum(freq, 1.0 - freq)


def minor_allele_count(G):
    G = np.asarray(G, dtype=float)
    alt = np.nansum(G, axis=0)
    called = 2.0 * np.sum(~np.isnan(G), axis=0)
    return np.minimum(alt, called - alt)


def validate_genotypes(G):
    G = np.asarray(G, dtype=float)
    obs = G[~np.isnan(G)]
    if not np.all(np.isin(obs, (0.0, 1.0, 2.0))):
        raise ValidationError("genotype entries must be 0, 1, 2 or missing")
    return G


# -- imputation and scaling -------------------------------------------------

def impute_and_standardize(G):
    """Mean-impute missing calls, then center and scale each column to unit sample SD."""
    G = np.array(G, dtype=float)
    if G.ndim != 2:
        raise DimensionError("genotype matrix must be 2-d")
    miss = np.isnan(G)
    all_missing = miss.all(axis=0)
    if np.any(all_missing):
        raise ValidationError(f"variants {np.flatnonzero(all_missing).tolist()} are entirely missing")
    means = np.nanmean(G, axis=0)
    G[miss] = np.take(means, np.nonzero(miss)[1])
    return _scale(G - G.mean(axis=0))


def _scale(A):
    sd = A.std(axis=0, ddof=1)
    const = ~(sd > 1e-12 * max(1.0, float(np.abs(A).max(initial=0.0))))
    if np.any(const):
        raise ConstantVariantError(f"columns {np.flatnonzero(const).tolist()} have zero variance")
    return A / sd


def regress_out(M, covariates):
    """Residuals of every column of ``M`` on [1, covariates], re-standardized."""
    M = np.asarray(M, dtype=float)
    one_d = M.ndim == 1
    if one_d:
        M = M[:, None]
    C = np.asarray(covariates, dtype=float)
    if C.ndim == 1:
        C = C[:, None]
    if C.shape[0] != M.shape[0]:
        raise DimensionError("covariates and matrix disagree on the number of subjects")
    D = np.column_stack([np.ones(M.shape[0]), C])
    if np.linalg.matrix_rank(D) < D.shape[1]:
        raise SingularCovariateError("covariate matrix (with intercept) is rank deficient")
    coef, *_ = np.linalg.lstsq(D, M, rcond=None)
    R = _scale(M - D @ coef)
    return R[:, 0] if one_d else R


# -- pruning ----------------------------------------------------------------

def pairwise_abs_corr(G):
    """|correlation| over pairwise-complete observations; constant pairs count as 0."""
    C = pd.DataFrame(np.asarray(G, dtype=float)).corr(method="pearson", min_periods=2).to_numpy()
    C = np.abs(np.nan_to_num(C, nan=0.0))
    np.fill_diagonal(C, 0.0)
    return C


@dataclass
class PruneReport:
    kept: np.ndarray
    dropped_by_rule: dict = field(default_factory=dict)
    steps: list = field(default_factory=list)


def _thresholds(c_max):
    cs = [round(c, 10) for c in np.arange(0.9, c_max - 1e-9, -0.1)]
    if not cs or abs(cs[-1] - c_max) > 1e-9:
        cs.append(c_max)
    return cs


def prune_correlated(G, c_max, meta=None, pvalues=None, seed=0, corr=None, return_report=False):
    """Greedy two-mode sweep until no pair has |correlation| above ``c_max``.

    Mode 1 works within chromosomes and widens each offending pair to every
    same-chromosome variant correlated above the current level with either
    member; mode 2 handles the remaining pairs one at a time.  From each
    candidate set one variant is kept (protected ones first, then the most
    significant common variant, then the most severe annotation, then the
    largest MAF, then a seeded draw) and the others are dropped.
    """
    if not 0.0 < c_max < 1.0:
        raise ValidationError("c_max must lie in (0, 1)")
    G = np.asarray(G, dtype=float)
    p = G.shape[1]
    meta = _meta_frame(meta, G)
    C = pairwise_abs_corr(G) if corr is None else np.array(corr, dtype=float)
    np.fill_diagonal(C, 0.0)
    chrom = meta["chromosome"].astype(str).to_numpy()
    prio = pd.to_numeric(meta["priority"], errors="coerce").fillna(0.0).to_numpy()
    maf = pd.to_numeric(meta["maf"], errors="coerce").to_numpy()
    maf = np.where(np.isnan(maf), minor_allele_frequency(G), maf)
    sev = np.array([severity(c) for c in meta["consequence"]])
    pv = None if pvalues is None else np.asarray(pvalues, dtype=float)
    rng = np.random.default_rng(seed)
    alive = np.ones(p, dtype=bool)
    report = PruneReport(kept=np.zeros(0, int),
                         dropped_by_rule={"protected": 0, "pvalue": 0, "annotation": 0,
                                          "maf": 0, "random": 0})
    same_chrom = chrom[:, None] == chrom[None, :]

    for mode in (1, 2):
        for c0 in _thresholds(c_max):
            while True:
                live = alive[:, None] & alive[None, :]
                if mode == 1:
                    live &= same_chrom
                A = np.where(live, C, 0.0)
                flat = int(np.argmax(A))
                i, j = divmod(flat, p)
                if A[i, j] <= c0:
                    break
                cand = {i, j}
                if mode == 1:
                    extra = alive & same_chrom[i] & ((C[i] > c0) | (C[j] > c0))
                    cand.update(np.flatnonzero(extra).tolist())
                cand = np.array(sorted(cand))
                keep, rule = _choose_survivor(cand, prio, pv, maf, sev, rng)
                drop = cand[cand != keep]
                alive[drop] = False
                report.dropped_by_rule[rule] += drop.size
                report.steps.append({"mode": mode, "c": c0, "kept": int(keep),
                                     "dropped": drop.tolist(), "rule": rule})
    report.kept = np.flatnonzero(alive)
    return report if return_report else report.kept


def _choose_survivor(cand, prio, pv, maf, sev, rng):
    u0 = cand[prio[cand] > 0]
    if u0.size:
        top = u0[prio[u0] == prio[u0].max()]
        if top.size == 1:
            return int(top[0]), "protected"
        U = top
    else:
        common = cand[maf[cand] >= 0.01] if pv is not None else cand[:0]
        if common.size:
            best = np.nanmin(pv[common]) if np.any(~np.isnan(pv[common])) else np.nan
            U1 = common[pv[common] == best] if not np.isnan(best) else common[:0]
        else:
            U1 = cand[:0]
        worst = sev[cand].max()
        U2 = cand[sev[cand] == worst] if worst > 0 else cand[:0]
        if U1.size == 0:
            U = U2
        elif U2.size == 0:
            U = U1
        else:
            U = np.intersect1d(U1, U2)
            if U.size == 0:
                U = U1
        if U.size == 0:
            U = cand
        if U.size == 1:
            return int(U[0]), "pvalue" if U1.size and U[0] in U1 else "annotation"
    best = U[maf[U] == maf[U].max()]
    if best.size == 1:
        return int(best[0]), "maf"
    return int(rng.choice(best)), "random"


def _meta_frame(meta, G):
    p = G.shape[1]
    if meta is None:
        meta = pd.DataFrame({"variant_id": [f"v{i}" for i in range(p)]})
    meta = meta.reset_index(drop=True).copy()
    if len(meta) != p:
        raise DimensionError(f"metadata has {len(meta)} rows for {p} variants")
    defaults = {"chromosome": "1", "position": np.arange(p), "gene": "", "consequence": "",
                "maf": np.nan, "priority": 0.0}
    for col, val in defaults.items():
        if col not in meta:
            meta[col] = val
    if "variant_id" not in meta:
        meta["variant_id"] = [f"v{i}" for i in range(p)]
    return meta


def collapse_duplicates(G, meta=None):
    """Keep one representative of every set of identical genotype columns.

    Identity includes the missing-data pattern.  The representative is the
    one with highest priority, then most severe annotation, then largest MAF,
    then smallest index.  Returns the sorted kept indices.
    """
    G = np.asarray(G, dtype=float)
    meta = _meta_frame(meta, G)
    prio = pd.to_numeric(meta["priority"], errors="coerce").fillna(0.0).to_numpy()
    sev = np.array([severity(c) for c in meta["consequence"]])
    maf = minor_allele_frequency(G)
    codes = np.where(np.isnan(G), -1, G).astype(np.int8)
    _, inverse = np.unique(codes.T, axis=0, return_inverse=True)
    inverse = np.ravel(inverse)
    kept = []
    for cls in np.unique(inverse):
        members = np.flatnonzero(inverse == cls)
        order = np.lexsort((members, -maf[members], -sev[members], -prio[members]))
        kept.append(int(members[order[0]]))
    return np.array(sorted(kept), dtype=int)


def group_rare_variants(meta, maf_threshold=0.01):
    """Group ids: rare nonsynonymous variants of one gene share a group, all else alone.

    Group ids are 0..r-1 in order of first appearance.
    """
    meta = meta.reset_index(drop=True)
    ids = np.empty(len(meta), dtype=np.int64)
    gene_group = {}
    nxt = 0
    for i, row in meta.iterrows():
        gene = row.get("gene", "")
        rare_nonsyn = (severity(row.get("consequence")) > 0
                       and float(row.get("maf", np.nan)) < maf_threshold
                       and isinstance(gene, str) and gene != "")
        if rare_nonsyn:
            if gene not in gene_group:
                gene_group[gene] = nxt
                nxt += 1
            ids[i] = gene_group[gene]
        else:
            ids[i] = nxt
            nxt += 1
    return ids
