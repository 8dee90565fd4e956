"""Command-line interface: fit, correct, simulate, diagnose, curves, gmm, prep.

Exit codes: 0 success, 1 input error (bad files, schema violations, bad
flags), 2 numerical failure (non-convergence, integration or simulation
trouble).  Every run writes a ``<out>.manifest.json`` next to its outputs
recording the command, config digest, seed, and input file digests.
"""
from __future__ import annotations

import argparse
import sys
import time
from typing import Optional

import numpy as np
import pandas as pd
from scipy.stats import norm

from . import correct as correct_mod
from . import estimate as estimate_mod
from . import gmm as gmm_mod
from . import io as io_mod
from .simulate import (
    DiscreteSigma,
    FixedSigma,
    LogUniformSigma,
    ReplicationRule,
    SimConfig,
    SimulationBudgetError,
    simulate as run_simulation,
    symmetry_diagnostic,
    z_density_diagnostics,
)
from .likelihood import ModelSpec
from .model import (
    GammaAbs,
    InputError,
    ModelEvaluationError,
    Normal,
    NumericalIntegrationError,
    PointMass,
    SelectionFunction,
    TLocationScale,
)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERICAL = 2


def _parse_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v != "")
    except ValueError:
        raise InputError(f"cannot parse {text!r} as a comma-separated number list")


def _parse_selection(cutoffs: str, coefficients: Optional[str], symmetric: bool,
                     reference_cell: Optional[int]) -> SelectionFunction:
    cuts = _parse_floats(cutoffs)
    if coefficients is None:
        coefs = tuple(1.0 for _ in range(len(cuts) + 1))
    else:
        coefs = _parse_floats(coefficients)
    ref = reference_cell if reference_cell is not None else len(coefs) - 1
    return SelectionFunction(cutoffs=cuts, coefficients=coefs,
                             reference_cell=ref, symmetric=symmetric)


_EFFECT_BUILDERS = {
    "gamma": (GammaAbs, 2),
    "t": (TLocationScale, 3),
    "normal": (Normal, 2),
    "point": (PointMass, 1),
}


def _parse_effect(text: str):
    """'gamma:1,0.2'  't:0,1,3'  'normal:0,1'  'point:0' — family defaults: unit params."""
    family, _, raw = text.partition(":")
    if family not in _EFFECT_BUILDERS:
        raise InputError(f"unknown effect family {family!r}; "
                         f"choose from {sorted(_EFFECT_BUILDERS)}")
    cls, arity = _EFFECT_BUILDERS[family]
    params = _parse_floats(raw) if raw else (1.0,) * arity
    if family == "normal" and not raw:
        params = (0.0, 1.0)
    if family == "t" and not raw:
        params = (0.0, 1.0, 3.0)
    if family == "point" and not raw:
        params = (0.0,)
    if len(params) != arity:
        raise InputError(f"effect family {family!r} needs {arity} parameters")
    return cls(*params)


def _parse_sigma_dist(text: str):
    kind, _, raw = text.partition(":")
    if kind == "fixed":
        return FixedSigma(float(raw or 1.0))
    if kind == "choice":
        return DiscreteSigma(_parse_floats(raw))
    if kind == "loguniform":
        lo, hi = _parse_floats(raw)
        return LogUniformSigma(lo, hi)
    raise InputError(f"unknown sigma distribution {text!r}")


def _parse_replication_rule(text: Optional[str]):
    if text is None:
        return None
    kind, _, raw = text.partition(":")
    if kind == "fixed":
        return ReplicationRule(fixed=float(raw or 1.0))
    if kind == "step":
        cuts_raw, _, vals_raw = raw.partition(";")
        return ReplicationRule(cutoffs=_parse_floats(cuts_raw),
                                       values=_parse_floats(vals_raw))
    raise InputError(f"unknown replication rule {text!r}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    started = time.time()
    records = io_mod.read_study_csv(args.data, sign_normalized=args.sign_normalized,
                                    cluster_column=args.cluster)
    selection = _parse_selection(args.cutoffs, None, args.symmetric, args.reference_cell)
    effect = _parse_effect(args.effect)
    spec = ModelSpec(kind=args.kind, selection=selection, effect=effect)
    options = {
        "seed": args.seed,
        "n_nodes": args.nodes,
        "n_restarts": args.restarts,
        "cluster": args.cluster is not None or args.cluster_by_id,
    }
    fit = estimate_mod.fit_mle(records, spec, options=options)
    io_mod.write_text_atomic(args.out, io_mod.fit_to_document(fit, args.sign_normalized))
    io_mod.write_manifest(args.out, "fit", vars(args), [args.data], [args.out],
                          args.seed, started)
    print(f"fit: loglik={fit.loglik:.6f} converged={fit.converged} "
          f"restarts={fit.n_restarts_used}")
    for name, est, se in zip(fit.param_names, fit.theta_hat,
                             fit.se if fit.se is not None else [float("nan")] * len(fit.theta_hat)):
        print(f"  {name:12s} {est: .6g} ({se:.6g})")
    return EXIT_OK if fit.converged else EXIT_NUMERICAL


def cmd_correct(args) -> int:
    started = time.time()
    fit, fit_signed = io_mod.fit_from_document(args.fit)
    records = io_mod.read_study_csv(args.data, sign_normalized=args.sign_normalized)
    if fit_signed != args.sign_normalized:
        raise InputError(
            "sign normalization mismatch between fit document and --sign-normalized flag"
        )
    rows = []
    for rec in records:
        if args.bonferroni:
            ci = correct_mod.bonferroni_interval(
                rec.x, rec.sigma, fit, alpha=args.alpha, delta=args.delta,
                study_id=rec.study_id,
            )
        else:
            ci = correct_mod.corrected_interval(
                rec.x, rec.sigma, fit.spec.selection, alpha=args.alpha,
                study_id=rec.study_id,
            )
        row = {
            "study_id": ci.study_id,
            "x": ci.x,
            "sigma": ci.sigma,
            "theta_median": ci.theta_median,
            "ci_lower": ci.ci_lower,
            "ci_upper": ci.ci_upper,
            "alpha": ci.alpha,
        }
        if args.bonferroni:
            row.update(bonf_lower=ci.bonf_lower, bonf_upper=ci.bonf_upper,
                       delta=ci.delta)
        rows.append(row)
    io_mod.write_csv_atomic(args.out, pd.DataFrame(rows))
    io_mod.write_manifest(args.out, "correct", vars(args), [args.data, args.fit],
                          [args.out], None, started)
    print(f"corrected {len(rows)} studies -> {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    started = time.time()
    config = SimConfig(
        mu=_parse_effect(args.mu),
        p=_parse_selection(args.p_cutoffs, args.p_coefficients, args.p_symmetric,
                           args.reference_cell),
        sigma_dist=_parse_sigma_dist(args.sigma),
        replication=_parse_replication_rule(args.replication),
        n_published=args.n_published,
        n_latent=args.n_latent,
        seed=args.seed,
        emit_latent=args.emit_latent,
        sign_normalize=args.sign_normalize,
    )
    table = run_simulation(config)
    io_mod.write_csv_atomic(args.out, table)
    io_mod.write_manifest(args.out, "simulate", vars(args), [], [args.out],
                          args.seed, started)
    print(f"simulated {len(table)} rows -> {args.out}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    started = time.time()
    records = io_mod.read_study_csv(args.data, sign_normalized=args.sign_normalized)
    cutoffs = _parse_floats(args.cutoffs)
    outputs = []

    zd = z_density_diagnostics(records, cutoffs, bin_width=args.bin_width)
    dens = pd.DataFrame({
        "bin_left": zd.bin_edges[:-1],
        "bin_right": zd.bin_edges[1:],
        "count": zd.counts,
        "density": zd.density,
        "bunching_flag": [int(i in zd.bunching_bins) for i in range(len(zd.counts))],
    })
    path = args.out + ".density.csv"
    io_mod.write_csv_atomic(path, dens)
    outputs.append(path)
    jumps = pd.DataFrame({
        "cutoff": zd.cutoffs,
        "jump_ratio": zd.jump_ratios,
        "bunching_bound": zd.bunching_bound,
    })
    path = args.out + ".jumps.csv"
    io_mod.write_csv_atomic(path, jumps)
    outputs.append(path)

    if any(r.has_replication for r in records):
        edges = _parse_floats(args.sym_bins)
        sym = symmetry_diagnostic(records, edges, seed=args.seed)
        rows = []
        nb = len(sym.bin_edges) - 1
        for a in range(nb):
            for b in range(nb):
                if np.isfinite(sym.h[a, b]):
                    rows.append({
                        "bin_a": a, "bin_b": b,
                        "h": sym.h[a, b], "h_se": sym.h_se[a, b],
                        "count_ab": sym.counts[a, b], "count_ba": sym.counts[b, a],
                    })
        path = args.out + ".symmetry.csv"
        io_mod.write_csv_atomic(path, pd.DataFrame(rows))
        outputs.append(path)
        summary = pd.DataFrame([{
            "max_abs_residual": sym.max_abs_residual,
            "bootstrap_se": sym.bootstrap_se,
            "n_valid_bins": len(sym.valid_bins),
        }])
        path = args.out + ".symmetry_summary.csv"
        io_mod.write_csv_atomic(path, summary)
        outputs.append(path)

    if not args.sign_normalized:
        rows = []
        for kind in ("XonSigma", "ZonInvSigma"):
            res = estimate_mod.meta_regression(records, kind, clustering=True)
            rows.append({
                "kind": kind, "intercept": res.intercept, "slope": res.slope,
                "se_intercept": res.se_intercept, "se_slope": res.se_slope,
                "n": res.n, "n_clusters": res.n_clusters,
            })
        path = args.out + ".metareg.csv"
        io_mod.write_csv_atomic(path, pd.DataFrame(rows))
        outputs.append(path)

    io_mod.write_manifest(args.out, "diagnose", vars(args), [args.data], outputs,
                          args.seed, started)
    print(f"diagnostics -> {', '.join(outputs)}")
    return EXIT_OK


def cmd_curves(args) -> int:
    started = time.time()
    p = _parse_selection(args.p_cutoffs, args.p_coefficients, args.p_symmetric,
                         args.reference_cell)
    lo, hi, step = _parse_floats(args.theta_grid)
    grid = np.arange(lo, hi + step / 2.0, step)
    table = correct_mod.bias_coverage_curves(p, args.sigma, grid, alpha=args.alpha)
    io_mod.write_csv_atomic(args.out, table)
    io_mod.write_manifest(args.out, "curves", vars(args), [], [args.out], None, started)
    print(f"curves over {len(grid)} grid points -> {args.out}")
    return EXIT_OK


def cmd_gmm(args) -> int:
    started = time.time()
    records = io_mod.read_study_csv(args.data, sign_normalized=args.sign_normalized)
    selection = _parse_selection(args.cutoffs, None, args.symmetric, args.reference_cell)
    if args.kind == "replication":
        pairs = tuple((c, c) for c in selection.cutoffs) if selection.symmetric else \
            tuple((abs(c), abs(c)) for c in selection.cutoffs)
        sigma_max = args.sigma_max
        if sigma_max is None:
            sigma_max = max(r.rel_sigmar for r in records if r.has_replication)
        system = gmm_mod.MomentSystem(
            "replication_baseline", selection,
            cutoff_pairs=pairs[: len(selection.coefficients) - 1],
            sigma_max=sigma_max,
            printed_lower_bound=not args.symmetric_lower_bound,
        )
    elif args.kind == "replication-simple":
        system = gmm_mod.MomentSystem("replication_simple", selection)
    elif args.kind == "metastudy":
        thresholds = tuple(selection.cutoffs)[: len(selection.coefficients) - 1]
        system = gmm_mod.MomentSystem("metastudy_pairwise", selection,
                                      thresholds=thresholds)
    else:
        raise InputError(f"unknown gmm kind {args.kind!r}")

    rows = []
    try:
        est = gmm_mod.gmm_point_estimate(records, system)
        for i, cell in enumerate(system.free_cells):
            rows.append({
                "parameter": f"beta[{cell}]",
                "estimate": est.beta_hat[i],
                "se": est.se[i],
                "negative_solution": int(est.negative_solution),
            })
    except InputError as exc:
        print(f"point estimate unavailable: {exc}", file=sys.stderr)
    grid = gmm_mod.default_beta_grid(system.n_free, beta_max=args.beta_max,
                                     resolution=args.resolution)
    cs = gmm_mod.stock_wright_cs(records, system, beta_grid=grid, level=args.level)
    for i, cell in enumerate(system.free_cells):
        lo, hi = cs.intervals[i]
        rows.append({
            "parameter": f"beta[{cell}]_cs",
            "cs_lower": lo,
            "cs_upper": hi,
            "cs_unbounded_above": int(cs.unbounded_above[i]),
            "level": cs.level,
        })
    io_mod.write_csv_atomic(args.out, pd.DataFrame(rows))
    io_mod.write_manifest(args.out, "gmm", vars(args), [args.data], [args.out],
                          None, started)
    print(f"gmm results -> {args.out}")
    return EXIT_OK


def cmd_prep(args) -> int:
    """Build the study CSV from p-values and standardized effect sizes.

    z-statistics invert the p-value transform (two-sided by default), effects
    are Fisher-transformed correlations, and the standard error is their
    ratio.
    """
    started = time.time()
    try:
        raw = pd.read_csv(args.data)
    except FileNotFoundError:
        raise InputError(f"data file not found: {args.data}")
    for col in (args.p_col, args.r_col):
        if col not in raw.columns:
            raise InputError(f"{args.data}: missing column {col!r}")

    def invert(p_vals, sided):
        p_vals = np.asarray(p_vals, dtype=float)
        if np.any((p_vals <= 0) | (p_vals >= 1)):
            raise InputError("p-values must lie strictly inside (0, 1)")
        return norm.ppf(1.0 - p_vals / sided) if sided == 1 else \
            norm.ppf(1.0 - p_vals / 2.0)

    z = invert(raw[args.p_col], args.sided)
    effect = np.arctanh(np.asarray(raw[args.r_col], dtype=float))
    sigma = effect / z
    out = pd.DataFrame({
        "study_id": raw[args.id_col] if args.id_col in raw.columns
        else [f"study{i:04d}" for i in range(len(raw))],
        "cluster_id": raw[args.id_col] if args.id_col in raw.columns
        else [f"study{i:04d}" for i in range(len(raw))],
        "x": effect,
        "sigma": sigma,
    })
    if args.pr_col and args.rr_col:
        if args.pr_col not in raw.columns or args.rr_col not in raw.columns:
            raise InputError("replication columns not found")
        zr = invert(raw[args.pr_col], args.sided)
        xr = np.arctanh(np.asarray(raw[args.rr_col], dtype=float))
        out["xr"] = xr
        out["sigmar"] = xr / zr
    io_mod.write_csv_atomic(args.out, out)
    io_mod.write_manifest(args.out, "prep", vars(args), [args.data], [args.out],
                          None, started)
    print(f"prepared {len(out)} studies -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pubsel",
        description="Step-function publication-selection models: estimation and corrections.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_selection_flags(sp, prefix=""):
        dash = prefix + ("-" if prefix else "")
        sp.add_argument(f"--{dash}cutoffs", dest=f"{prefix}_cutoffs" if prefix else "cutoffs",
                        required=True, help="comma-separated z cutoffs")
        sp.add_argument(f"--{dash}coefficients",
                        dest=f"{prefix}_coefficients" if prefix else "coefficients",
                        default=None, help="comma-separated cell coefficients")
        sp.add_argument(f"--{dash}symmetric",
                        dest=f"{prefix}_symmetric" if prefix else "symmetric",
                        action="store_true", help="cells read off |z|")

    fit = sub.add_parser("fit", help="maximum-likelihood selection model fit")
    fit.add_argument("--data", required=True)
    fit.add_argument("--kind", choices=("replication", "metastudy"), required=True)
    fit.add_argument("--cutoffs", required=True, help="comma-separated z cutoffs")
    fit.add_argument("--symmetric", action="store_true", help="cells read off |z|")
    fit.add_argument("--effect", required=True,
                     help="gamma:k,l | t:loc,scale,df | normal:loc,scale | point:loc "
                          "(parameters are starting values)")
    fit.add_argument("--cluster", default=None,
                     help="cluster-by column for the vcov (default: none)")
    fit.add_argument("--cluster-by-id", action="store_true",
                     help="cluster the vcov by the cluster_id column")
    fit.add_argument("--sign-normalized", action="store_true")
    fit.add_argument("--reference-cell", type=int, default=None)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--nodes", type=int, default=201)
    fit.add_argument("--restarts", type=int, default=10)
    fit.add_argument("--out", required=True)
    fit.set_defaults(func=cmd_fit)

    cor = sub.add_parser("correct", help="per-study corrected estimates and intervals")
    cor.add_argument("--data", required=True)
    cor.add_argument("--fit", required=True)
    cor.add_argument("--alpha", type=float, default=0.05)
    cor.add_argument("--delta", type=float, default=0.005)
    cor.add_argument("--bonferroni", action="store_true")
    cor.add_argument("--sign-normalized", action="store_true")
    cor.add_argument("--out", required=True)
    cor.set_defaults(func=cmd_correct)

    sim = sub.add_parser("simulate", help="simulate the selection DGP")
    sim.add_argument("--mu", required=True, help="effect distribution, e.g. gamma:1,0.2")
    add_selection_flags(sim, "p")
    sim.add_argument("--sigma", default="fixed:1",
                     help="fixed:v | choice:v1,v2,... | loguniform:lo,hi")
    sim.add_argument("--replication", default=None,
                     help="fixed:sd | step:c1,c2;v1,v2,v3 (relative sds by |z|)")
    group = sim.add_mutually_exclusive_group(required=True)
    group.add_argument("--n-published", type=int, default=None)
    group.add_argument("--n-latent", type=int, default=None)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--emit-latent", action="store_true")
    sim.add_argument("--sign-normalize", action="store_true")
    sim.add_argument("--reference-cell", type=int, default=None)
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_simulate)

    diag = sub.add_parser("diagnose", help="z-density, symmetry, and meta-regression diagnostics")
    diag.add_argument("--data", required=True)
    diag.add_argument("--cutoffs", default="1.96", help="candidate jump locations")
    diag.add_argument("--bin-width", type=float, default=0.1)
    diag.add_argument("--sym-bins", default="-6,-1.96,-0.5,0.5,1.96,6",
                      help="bin edges for the replication symmetry table")
    diag.add_argument("--sign-normalized", action="store_true")
    diag.add_argument("--seed", type=int, default=0)
    diag.add_argument("--out", required=True, help="output path prefix")
    diag.set_defaults(func=cmd_diagnose)

    cur = sub.add_parser("curves", help="bias and coverage curves for a selection function")
    add_selection_flags(cur, "p")
    cur.add_argument("--sigma", type=float, default=1.0)
    cur.add_argument("--theta-grid", default="0,6,0.25", help="lo,hi,step")
    cur.add_argument("--alpha", type=float, default=0.05)
    cur.add_argument("--reference-cell", type=int, default=None)
    cur.add_argument("--out", required=True)
    cur.set_defaults(func=cmd_curves)

    gm = sub.add_parser("gmm", help="moment estimates and weak-identification-robust sets")
    gm.add_argument("--data", required=True)
    gm.add_argument("--kind", choices=("replication", "replication-simple", "metastudy"),
                    required=True)
    gm.add_argument("--cutoffs", required=True)
    gm.add_argument("--symmetric", action="store_true")
    gm.add_argument("--sigma-max", type=float, default=None)
    gm.add_argument("--symmetric-lower-bound", action="store_true",
                    help="use the -c2 variant of the replication moment's second factor")
    gm.add_argument("--sign-normalized", action="store_true")
    gm.add_argument("--beta-max", type=float, default=5.0)
    gm.add_argument("--resolution", type=float, default=1e-3)
    gm.add_argument("--level", type=float, default=0.95)
    gm.add_argument("--reference-cell", type=int, default=None)
    gm.add_argument("--out", required=True)
    gm.set_defaults(func=cmd_gmm)

    prep = sub.add_parser("prep", help="build the study CSV from p-values and effect sizes")
    prep.add_argument("--data", required=True)
    prep.add_argument("--p-col", default="p")
    prep.add_argument("--r-col", default="r")
    prep.add_argument("--pr-col", default=None)
    prep.add_argument("--rr-col", default=None)
    prep.add_argument("--id-col", default="study_id")
    prep.add_argument("--sided", type=int, choices=(1, 2), default=2)
    prep.add_argument("--out", required=True)
    prep.set_defaults(func=cmd_prep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalIntegrationError, ModelEvaluationError,
            SimulationBudgetError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
