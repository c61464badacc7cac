"""Simulation: designs, causal-structure draws and trait generation."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from scipy.stats import norm

from . import dataprep
from .errors import DimensionError, ScenarioInfeasibleError, ValidationError


class Scenario(enum.Enum):
    EXCHANGEABLE = "exchangeable"
    PLEIOTROPY = "pleiotropy"
    GENE_EFFECT = "gene-effect"
    GENOTYPE_BASED = "genotype-based"


@dataclass(frozen=True)
class ScenarioSpec:
    kind: Scenario
    n: int
    p: int
    q: int
    tau_range: tuple = (0.045, 0.063)
    omega: tuple = (12.0, 48.0)          # exchangeable, per trait
    omega_upper: tuple = (16.0, 55.0)    # omega_W / omega_G
    nu: tuple = (48.0, 12.0)             # nu_v / nu_g
    group_size: int = 5
    n_pleiotropic: int = 10
    prob_pleiotropic: float = 0.9
    n_specific: int = 40
    prob_specific: float = 0.1
    causal_counts: tuple = (3, 4)
    min_group_size: int = 5
    rare_maf: float = 0.01

    def __post_init__(self):
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", Scenario(self.kind))
        if min(self.n, self.p, self.q) <= 0:
            raise ValidationError("n, p and q must be positive")
        lo, hi = self.tau_range
        if not 0 < lo <= hi:
            raise ValidationError("tau_range must be a positive interval")


@dataclass
class GenotypeInfo:
    """What the genotype-based rule needs: MAF per variant and the group map."""

    maf: np.ndarray
    groups: np.ndarray


@dataclass
class TruthSet:
    Z_true: np.ndarray
    beta_true: np.ndarray
    tau_used: float
    rho_used: float = 1.0
    W: Optional[np.ndarray] = None
    G: Optional[np.ndarray] = None
    draws: dict = field(default_factory=dict)


def make_orthogonal_design(n, p):
    """Stacked scaled identities with X'X = (n - 1) I (columns are not centered)."""
    if n <= 0 or p <= 0 or n % p:
        raise DimensionError(f"p={p} must divide n={n}")
    c = math.sqrt((n - 1) / (n / p))
    return c * np.tile(np.eye(p), (n // p, 1))


def consecutive_groups(p, size=5):
    return np.arange(p) // size


def gen_truth(scenario, rng, genotypes=None):
    s = scenario
    p, q = s.p, s.q
    Z = np.zeros((p, q), np.int8)
    W = G = None
    draws = {}
    if s.kind is Scenario.EXCHANGEABLE:
        omega = rng.beta(*s.omega, size=q)
        Z[:] = rng.random((p, q)) < omega
        draws["omega"] = omega.tolist()
    elif s.kind is Scenario.PLEIOTROPY:
        omega_w = rng.beta(*s.omega_upper)
        W = (rng.random(p) < omega_w).astype(np.int8)
        nu = np.where(W == 1, rng.beta(*s.nu, size=p), 0.0)
        Z[:] = rng.random((p, q)) < nu[:, None]
        draws.update(omega_w=float(omega_w), nu=nu.tolist())
    elif s.kind is Scenario.GENE_EFFECT:
        groups = consecutive_groups(p, s.group_size)
        r = groups.max() + 1
        omega_g = rng.beta(*s.omega_upper, size=q)
        G = (rng.random((r, q)) < omega_g).astype(np.int8)
        nu = np.where(G == 1, rng.beta(*s.nu, size=(r, q)), 0.0)
        Z[:] = rng.random((p, q)) < nu[groups]
        draws.update(omega_g=omega_g.tolist(), nu=nu.tolist())
    else:
        Z, draws = _genotype_based(s, rng, genotypes)
    tau = float(rng.uniform(*s.tau_range))
    beta = np.where(Z == 1, rng.normal(0.0, tau, size=(p, q)), 0.0)
    return TruthSet(Z, beta, tau, 1.0, W, G, draws)


def _genotype_based(s, rng, info):
    if info is None:
        raise ValidationError("genotype-based scenario needs MAF and group map")
    maf = np.asarray(info.maf, float)
    groups = np.asarray(info.groups)
    p, q = s.p, s.q
    if maf.shape != (p,) or groups.shape != (p,):
        raise DimensionError("MAF vector and group map must have length p")
    sizes = np.bincount(groups)
    eligible = np.flatnonzero(sizes >= s.min_group_size)
    if eligible.size == 0:
        raise ScenarioInfeasibleError(f"no group with at least {s.min_group_size} variants")
    common = np.flatnonzero(maf >= s.rare_maf)
    need = s.n_pleiotropic + s.n_specific
    if common.size < need:
        raise ScenarioInfeasibleError(f"{common.size} common variants, need {need}")
    Z = np.zeros((p, q), np.int8)
    genes = []
    for t in range(q):
        g = int(rng.choice(eligible))
        members = np.flatnonzero(groups == g)
        rare = members[maf[members] < s.rare_maf]
        k = min(int(rng.integers(s.causal_counts[0], s.causal_counts[1] + 1)), rare.size)
        Z[rng.choice(rare, size=k, replace=False), t] = 1
        genes.append(g)
    picked = rng.choice(common, size=need, replace=False)
    pleio, specific = picked[:s.n_pleiotropic], picked[s.n_pleiotropic:]
    Z[pleio] |= (rng.random((pleio.size, q)) < s.prob_pleiotropic).astype(np.int8)
    Z[specific] |= (rng.random((specific.size, q)) < s.prob_specific).astype(np.int8)
    return Z, {"gene_group": genes, "pleiotropic": pleio.tolist(), "specific": specific.tolist()}


def gen_traits(X, truth, rng):
    X = np.asarray(X, float)
    if X.shape[1] != truth.beta_true.shape[0]:
        raise DimensionError("design and coefficients disagree on p")
    noise = rng.normal(0.0, 1.0 / math.sqrt(truth.rho_used), size=(X.shape[0], truth.beta_true.shape[1]))
    return X @ truth.beta_true + noise


# -- synthetic genotypes ----------------------------------------------------

@dataclass
class GenotypePanel:
    """Raw counts (with missing calls) plus per-variant metadata."""

    counts: np.ndarray
    meta: pd.DataFrame


def synthetic_genotypes(n, p_raw, rng, n_chromosomes=3, n_genes=36, rare_fraction=0.55,
                        ld=0.85, missing_rate=0.002):
    """Haplotype-based genotypes with local LD and a skewed MAF spectrum.

    Each chromosome is an AR(1) Gaussian field along position; an allele is
    present where the field falls below the MAF quantile, and two haplotypes
    make a genotype.  Rare variants draw MAF log-uniformly in (0.001, 0.01),
    common ones in (0.01, 0.5).
    """
    chrom = np.sort(rng.integers(1, n_chromosomes + 1, size=p_raw))
    rare = rng.random(p_raw) < rare_fraction
    maf = np.where(rare, np.exp(rng.uniform(np.log(0.001), np.log(0.01), p_raw)),
                   np.exp(rng.uniform(np.log(0.01), np.log(0.5), p_raw)))
    gene_bounds = np.sort(rng.choice(np.arange(1, p_raw), size=n_genes - 1, replace=False))
    gene = np.searchsorted(gene_bounds, np.arange(p_raw), side="right")
    hap = np.empty((2 * n, p_raw))
    z = rng.standard_normal(2 * n)
    for v in range(p_raw):
        if v > 0 and chrom[v] != chrom[v - 1]:
            z = rng.standard_normal(2 * n)
        elif v > 0:
            rho = ld if gene[v] == gene[v - 1] else 0.5 * ld
            z = rho * z + math.sqrt(1 - rho * rho) * rng.standard_normal(2 * n)
        hap[:, v] = z < norm.ppf(maf[v])
    counts = hap[:n] + hap[n:]
    counts[rng.random(counts.shape) < missing_rate] = np.nan
    roll = rng.random(p_raw)
    consequence = np.where(roll < 0.1, "nonsense",
                           np.where(roll < 0.65, "missense",
                                    np.where(roll < 0.85, "synonymous", "intron")))
    consequence = np.where(rare, consequence,
                           np.where(rng.random(p_raw) < 0.2, "missense", "intron"))
    meta = pd.DataFrame({
        "variant_id": [f"rs{100000 + i}" for i in range(p_raw)],
        "chromosome": chrom.astype(str),
        "position": np.arange(p_raw) * 100 + 1000,
        "gene": [f"GENE{g + 1}" for g in gene],
        "consequence": consequence,
        "maf": dataprep.minor_allele_frequency(counts),
        "priority": 0.0,
    })
    return GenotypePanel(counts, meta)


@dataclass
class PreparedGenotypes:
    X: np.ndarray
    meta: pd.DataFrame
    groups: np.ndarray
    maf: np.ndarray


def prepared_genotype_design(n, p, seed, c_max=0.3, p_raw=None, max_tries=4, **kw):
    """Synthetic panel -> drop singletons/duplicates -> prune -> first ``p`` -> standardize.

    When too few variants survive, the raw panel is regenerated 1.5x larger.
    """
    rng = np.random.default_rng(seed)
    p_raw = p_raw or int(2.2 * p)
    for _ in range(max_tries):
        panel = synthetic_genotypes(n, p_raw, rng, **kw)
        G, meta = panel.counts, panel.meta
        keep = np.flatnonzero(dataprep.minor_allele_count(G) > 1)
        G, meta = G[:, keep], meta.iloc[keep].reset_index(drop=True)
        keep = dataprep.collapse_duplicates(G, meta)
        G, meta = G[:, keep], meta.iloc[keep].reset_index(drop=True)
        keep = dataprep.prune_correlated(G, c_max, meta, seed=seed)
        if keep.size >= p:
            break
        p_raw = int(1.5 * p_raw)
    else:
        raise ScenarioInfeasibleError(f"only {keep.size} variants survive pruning, need {p}")
    keep = keep[:p]
    G, meta = G[:, keep], meta.iloc[keep].reset_index(drop=True)
    X = dataprep.impute_and_standardize(G)
    maf = dataprep.minor_allele_frequency(G)
    meta["maf"] = maf
    groups = dataprep.group_rare_variants(meta)
    return PreparedGenotypes(X, meta, groups, maf)
