"""Command-line entry point: ``sparsepost <subcommand> ...``.

Exit status is 0 on success, 2 for invalid input and 3 for numerical
failures.  ``SPARSEPOST_SEED`` in the environment overrides ``--seed``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import baselines, dataprep, evaluation, exact, simgen
from . import io as sio
from .errors import NumericalError, ValidationError
from .model import Covariance, DataSet, Hyperparameters, PriorKind, PriorSpec
from .sampler import ChainInit, SamplerConfig, run_ensemble

log = logging.getLogger("sparsepost")


def _seed(args):
    env = os.environ.get("SPARSEPOST_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValidationError(f"SPARSEPOST_SEED must be an integer, got {env!r}") from None
    return args.seed


def _outdir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _load_data(args):
    X, vids = sio.read_matrix(args.design)
    Y, tids = sio.read_matrix(args.traits)
    if args.standardize:
        return DataSet.standardized(X, Y, variant_ids=vids, trait_ids=tids)
    return DataSet(X, Y, vids, tids)


def _hyper(args):
    lo, hi = args.tau_bounds
    return Hyperparameters(tau_lo=lo, tau_hi=hi,
                           covariance=Covariance.IDENTITY if args.identity else Covariance.GPRIOR)


# -- subcommands ------------------------------------------------------------

def cmd_simulate(args):
    seed = _seed(args)
    rng = np.random.default_rng(seed)
    out = _outdir(args)
    kind = simgen.Scenario(args.scenario)
    extra = {}
    if kind is simgen.Scenario.GENOTYPE_BASED:
        if args.genotypes:
            G, vids = sio.read_matrix(args.genotypes, allow_missing=True)
            meta = sio.read_metadata(args.metadata) if args.metadata else pd.DataFrame({"variant_id": vids})
            X = dataprep.impute_and_standardize(G)
            maf = dataprep.minor_allele_frequency(G)
            meta["maf"] = maf
            groups = (sio.read_groups(args.groups, vids) if args.groups
                      else dataprep.group_rare_variants(meta))
        else:
            prep = simgen.prepared_genotype_design(args.n, args.p, seed, c_max=args.c_max)
            X, maf, groups = prep.X, prep.maf, prep.groups
            vids = prep.meta["variant_id"].tolist()
            prep.meta.to_csv(out / "metadata.csv", index=False)
        sio.write_groups(out / "groups.csv", vids, groups)
        n, p = X.shape
        info = simgen.GenotypeInfo(maf, groups)
    else:
        n, p = args.n, args.p
        X = simgen.make_orthogonal_design(n, p)
        vids = [f"v{i}" for i in range(p)]
        info = None
        if kind is simgen.Scenario.GENE_EFFECT or args.write_groups:
            sio.write_groups(out / "groups.csv", vids, simgen.consecutive_groups(p, args.group_size))
    spec = simgen.ScenarioSpec(kind, n, p, args.q, tau_range=tuple(args.tau_range),
                               group_size=args.group_size)
    truth = simgen.gen_truth(spec, rng, info)
    Y = simgen.gen_traits(X, truth, rng)
    tids = [f"trait{t + 1}" for t in range(args.q)]
    sio.write_matrix(out / "design.csv", X, vids)
    sio.write_matrix(out / "traits.csv", Y, tids)
    rows = [(vids[v], tids[t], int(truth.Z_true[v, t]), float(truth.beta_true[v, t]))
            for v in range(p) for t in range(args.q)]
    pd.DataFrame(rows, columns=["variant_id", "trait", "causal", "beta"]).to_csv(
        out / "truth.csv", index=False)
    extra.update(tau_used=truth.tau_used, draws=truth.draws,
                 trait_variance=Y.var(axis=0, ddof=1).tolist())
    sio.write_manifest(out / "manifest.json", "simulate", {**vars(args), "seed": seed}, extra)
    print(f"wrote {out}/design.csv, traits.csv, truth.csv ({n} x {p}, q={args.q})")


def cmd_prune(args):
    seed = _seed(args)
    out = _outdir(args)
    G, vids = sio.read_matrix(args.genotypes, allow_missing=True)
    dataprep.validate_genotypes(G)
    if args.metadata:
        meta = sio.read_metadata(args.metadata).set_index("variant_id").reindex(vids).reset_index()
    else:
        meta = pd.DataFrame({"variant_id": vids})
    meta["maf"] = dataprep.minor_allele_frequency(G)
    counts = {"input": len(vids)}
    keep = np.flatnonzero(dataprep.minor_allele_count(G) > args.min_mac)
    counts["low_count"] = len(vids) - keep.size
    G, meta = G[:, keep], meta.iloc[keep].reset_index(drop=True)
    keep = dataprep.collapse_duplicates(G, meta)
    counts["duplicate"] = G.shape[1] - keep.size
    G, meta = G[:, keep], meta.iloc[keep].reset_index(drop=True)
    pv = None
    if args.phenotypes:
        Y, _ = sio.read_matrix(args.phenotypes)
        X = dataprep.impute_and_standardize(G)
        pv = baselines.ols_pvalues(X, dataprep.impute_and_standardize(Y)).values.min(axis=1)
    report = dataprep.prune_correlated(G, args.c_max, meta, pvalues=pv, seed=seed,
                                       return_report=True)
    keep = report.kept
    counts.update({f"pruned_{k}": v for k, v in report.dropped_by_rule.items()})
    counts["kept"] = int(keep.size)
    G, meta = G[:, keep], meta.iloc[keep].reset_index(drop=True)
    ids = meta["variant_id"].tolist()
    sio.write_matrix(out / "genotypes.csv", G, ids)
    meta.to_csv(out / "metadata.csv", index=False)
    sio.write_groups(out / "groups.csv", ids, dataprep.group_rare_variants(meta, args.rare_maf))
    X = dataprep.impute_and_standardize(G)
    if args.covariates:
        Cv, _ = sio.read_matrix(args.covariates)
        X = dataprep.regress_out(X, Cv)
    sio.write_matrix(out / "design.csv", X, ids)
    if args.phenotypes:
        Y, tids = sio.read_matrix(args.phenotypes)
        Y = dataprep.regress_out(Y, Cv) if args.covariates else dataprep.impute_and_standardize(Y)
        sio.write_matrix(out / "traits.csv", Y, tids)
    sio.write_manifest(out / "prune.json", "prune", {**vars(args), "seed": seed}, {"counts": counts})
    print(f"kept {keep.size} of {counts['input']} variants")


def cmd_fit(args):
    seed = _seed(args)
    out = _outdir(args)
    data = _load_data(args)
    kind = PriorKind(args.prior)
    groups = None
    if kind is PriorKind.ACROSS_SITES:
        if not args.groups:
            raise ValidationError("--groups is required for the across-sites prior")
        groups = sio.read_groups(args.groups, data.variant_ids)
    spec = PriorSpec(kind, _hyper(args), groups)
    inits = [ChainInit.parse(s) for s in args.inits.split(",")] if args.inits else None
    config = SamplerConfig(n_chains=args.chains, burn_in=args.burnin, n_samples=args.samples,
                           seed=seed, chain_inits=inits, fixed_tau=args.tau_fixed,
                           thin=args.thin, n_workers=args.workers)
    summary = run_ensemble(config, spec, data)
    rows = []
    for v, vid in enumerate(data.variant_ids):
        for t, tid in enumerate(data.trait_ids):
            rows.append((vid, tid, summary.z_bar[v, t], summary.delta_z[v, t],
                         *summary.z_bar_per_chain[:, v, t]))
    cols = ["variant_id", "trait", "z_bar", "delta_z"] + [f"chain{c}" for c in range(args.chains)]
    pd.DataFrame(rows, columns=cols).to_csv(out / "zbar.csv", index=False)
    if summary.w_bar is not None:
        pd.DataFrame({"variant_id": data.variant_ids, "w_bar": summary.w_bar}).to_csv(
            out / "wbar.csv", index=False)
    if summary.g_bar is not None:
        gb = pd.DataFrame(summary.g_bar, columns=data.trait_ids)
        gb.insert(0, "group", np.arange(gb.shape[0]))
        gb.to_csv(out / "gbar.csv", index=False)
    extra = {"tau_mean": summary.tau_mean, "tau_var": summary.tau_var,
             "acceptance": summary.acceptance, "converged_fraction": summary.converged_fraction,
             "converged": summary.converged}
    sio.write_manifest(out / "fit.json", "fit", {**vars(args), "seed": seed}, extra)
    print(f"z_bar written to {out}/zbar.csv; {100 * summary.converged_fraction:.1f}% of "
          f"delta_z below {config.delta_threshold}")


def cmd_exact(args):
    out = _outdir(args)
    data = _load_data(args)
    table = exact.enumerate_posterior(data, _hyper(args), args.tau, args.k, trait=args.trait)
    pd.DataFrame({"config": table.bitmask_hex(), "size": table.sizes,
                  "log_posterior": table.log_post, "probability": table.prob}).to_csv(
        out / "configs.csv", index=False)
    pd.DataFrame({"variant_id": data.variant_ids, "pip": exact.exact_pips(table)}).to_csv(
        out / "pips.csv", index=False)
    cs = exact.confidence_set(table, args.threshold)
    pd.DataFrame({"step": np.arange(len(cs.variants) + 1),
                  "variant_id": [""] + [data.variant_ids[v] for v in cs.variants],
                  "p_set": cs.cumulative}).to_csv(out / "confidence_set.csv", index=False)
    sio.write_manifest(out / "exact.json", "exact", vars(args),
                       {"n_configs": len(table), "n_excluded": table.n_excluded})
    print(f"{len(table)} configurations; confidence set of size {len(cs.variants)}")


def cmd_baseline(args):
    seed = _seed(args)
    out = _outdir(args)
    data = _load_data(args)
    X, Y = data.X, data.Y
    if args.method in ("bh-marginal", "bh-full"):
        pv = baselines.ols_pvalues(X, Y, args.method.split("-")[1])
        pd.DataFrame(pv.values, columns=data.trait_ids, index=data.variant_ids).rename_axis(
            "variant_id").to_csv(out / "pvalues.csv")
        mask = baselines.bh_select(pv, args.alpha)
        extra = {"dof": pv.dof}
    else:
        mask, fits = baselines.lasso_select_traits(X, Y, rule=args.cv_rule, folds=args.folds,
                                                   seed=seed)
        cv = pd.concat([pd.DataFrame({"trait": tid, "lambda": f.lambdas, "cv_mean": f.cv_mean,
                                      "cv_se": f.cv_se})
                        for tid, f in zip(data.trait_ids, fits)])
        cv.to_csv(out / "cv_curve.csv", index=False)
        extra = {"lambda_min": [f.lambda_min for f in fits],
                 "lambda_1se": [f.lambda_1se for f in fits]}
    sel = [(data.variant_ids[v], data.trait_ids[t]) for v, t in np.argwhere(mask)]
    pd.DataFrame(sel, columns=["variant_id", "trait"]).to_csv(out / "selection.csv", index=False)
    sio.write_manifest(out / "baseline.json", "baseline", {**vars(args), "seed": seed}, extra)
    print(f"{len(sel)} (variant, trait) pairs selected")


def _zbar_matrix(path):
    df = pd.read_csv(path, dtype={"variant_id": str, "trait": str})
    wide = df.pivot(index="variant_id", columns="trait", values="z_bar")
    vids = list(dict.fromkeys(df["variant_id"]))
    tids = list(dict.fromkeys(df["trait"]))
    return wide.loc[vids, tids].to_numpy(), vids, tids


def _truth_matrix(path, vids, tids):
    df = pd.read_csv(path, dtype={"variant_id": str, "trait": str})
    wide = df.pivot(index="variant_id", columns="trait", values="causal")
    try:
        return wide.loc[vids, tids].to_numpy().astype(bool)
    except KeyError as exc:
        raise ValidationError(f"truth file lacks entries: {exc}") from None


def cmd_evaluate(args):
    out = _outdir(args)
    z, vids, tids = _zbar_matrix(args.zbar)
    truth = _truth_matrix(args.truth, vids, tids) if args.truth else None
    if args.bfdr_target is not None:
        rep = evaluation.select_by_bfdr(z, args.bfdr_target)
        if truth is not None:
            evaluation.score(rep, truth)
        sel = [(vids[v], tids[t], z[v, t]) for v, t in np.argwhere(rep.selected)]
        pd.DataFrame(sel, columns=["variant_id", "trait", "z_bar"]).to_csv(
            out / "selection.csv", index=False)
        summary = {"n_selected": rep.n_selected, "bfdr": rep.bfdr, "fdp": rep.fdp, "power": rep.power}
    else:
        grid = evaluation.default_xi_grid() if args.xi_grid == "default" else np.array(_floats(args.xi_grid))
        rows = []
        for xi in grid:
            rep = evaluation.select_by_threshold(z, xi)
            if truth is not None:
                evaluation.score(rep, truth)
            rows.append((xi, rep.n_selected, rep.bfdr, rep.fdp, rep.power))
        pd.DataFrame(rows, columns=["xi", "n_selected", "bfdr", "fdp", "power"]).to_csv(
            out / "curve.csv", index=False)
        summary = {"grid_points": len(rows)}
    sio.write_manifest(out / "evaluate.json", "evaluate", vars(args), summary)
    print(f"evaluation written to {out}")


# -- parser -----------------------------------------------------------------

def _data_args(p):
    p.add_argument("--design", required=True, help="design CSV (header of variant ids)")
    p.add_argument("--traits", required=True, help="trait CSV (one column per trait)")
    p.add_argument("--standardize", action="store_true", help="center and scale inputs first")
    p.add_argument("--out", required=True)


def _model_args(p):
    cov = p.add_mutually_exclusive_group()
    cov.add_argument("--gprior", action="store_true", default=True)
    cov.add_argument("--identity", action="store_true")
    p.add_argument("--tau-bounds", type=float, nargs=2, default=(0.01, 10.0), metavar=("LO", "HI"))


def build_parser():
    ap = argparse.ArgumentParser(prog="sparsepost", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a design, traits and the causal truth")
    s.add_argument("--scenario", default="exchangeable", choices=[k.value for k in simgen.Scenario])
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--p", type=int, default=50)
    s.add_argument("--q", type=int, default=5)
    s.add_argument("--tau-range", type=float, nargs=2, default=(0.045, 0.063))
    s.add_argument("--group-size", type=int, default=5)
    s.add_argument("--write-groups", action="store_true")
    s.add_argument("--genotypes", help="genotype CSV for the genotype-based scenario")
    s.add_argument("--metadata")
    s.add_argument("--groups")
    s.add_argument("--c-max", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("prune", help="filter genotypes to a maximum pairwise correlation")
    s.add_argument("--genotypes", required=True)
    s.add_argument("--metadata")
    s.add_argument("--phenotypes")
    s.add_argument("--covariates")
    s.add_argument("--c-max", type=float, default=0.3)
    s.add_argument("--min-mac", type=int, default=1, help="drop variants with minor allele count <= this")
    s.add_argument("--rare-maf", type=float, default=0.01)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prune)

    s = sub.add_parser("fit", help="run the MCMC sampler")
    _data_args(s)
    _model_args(s)
    s.add_argument("--prior", default="basic", choices=[k.value for k in PriorKind])
    s.add_argument("--groups", help="group map CSV (variant_id, group_id)")
    s.add_argument("--chains", type=int, default=4)
    s.add_argument("--burnin", type=int, default=10_000)
    s.add_argument("--samples", type=int, default=500_000)
    s.add_argument("--inits", help="comma list of chain starts, e.g. empty,full,top10,top20")
    s.add_argument("--tau-fixed", type=float)
    s.add_argument("--thin", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("exact", help="enumerate all small models for one trait")
    _data_args(s)
    _model_args(s)
    s.add_argument("--k", type=int, default=4, help="models must have fewer than K variants")
    s.add_argument("--tau", type=float, default=0.05)
    s.add_argument("--trait", type=int, default=0)
    s.add_argument("--threshold", type=float, default=0.7)
    s.set_defaults(func=cmd_exact)

    s = sub.add_parser("baseline", help="BH on OLS p-values or cross-validated Lasso")
    _data_args(s)
    s.add_argument("--method", default="bh-marginal", choices=["bh-marginal", "bh-full", "lasso"])
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--cv-rule", default="min", choices=["min", "1se"])
    s.add_argument("--folds", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("evaluate", help="selections, BFDR and FDP/power from z_bar")
    s.add_argument("--zbar", required=True, help="zbar.csv written by fit")
    s.add_argument("--truth", help="truth.csv written by simulate")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--xi-grid", default="default", help="comma list of thresholds or 'default'")
    g.add_argument("--bfdr-target", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
