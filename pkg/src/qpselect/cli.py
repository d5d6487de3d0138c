"""Command-line entry point: ``qpselect {fit,simulate,diagnose,oracle-check}``.

Every run writes ``manifest.json`` holding the fully resolved configuration;
``--manifest PATH`` re-runs from one. Exit codes: 0 ok, 2 input error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from scipy import linalg

from . import __version__
from .core import (
    BetaBinomial,
    FixedDispersion,
    FixedW,
    FullModelQMLE,
    L1Regularized,
    PriorConfig,
    RunConfig,
    read_csv,
)
from .errors import InputError, NumericalError
from .simbench import SCENARIOS, derive_seed, method_from_name, run_scenario_grid

logger = logging.getLogger("qpselect")

SCHEMA = 1
EXIT_INPUT = 2
EXIT_NUMERIC = 3


def _add_model_args(p):
    p.add_argument("--sweeps", type=int, default=3000)
    p.add_argument("--burn-in", type=int, default=1500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.05, help="Bayesian FDR level")
    p.add_argument("--slab-variance", type=float, default=9.0)
    p.add_argument("--beta-a", type=float, default=1.0)
    p.add_argument("--beta-b", type=float, default=1.0)
    p.add_argument("--fixed-w", type=float, default=None, help="fix the inclusion probability")
    p.add_argument("--dispersion", choices=["qmle", "lasso", "fixed"], default="qmle")
    p.add_argument("--psi", type=float, default=None, help="dispersion value for --dispersion fixed")
    p.add_argument("--newton-tol", type=float, default=1e-8)
    p.add_argument("--newton-max-iter", type=int, default=100)
    p.add_argument("--cache-cap", type=int, default=None)
    p.add_argument("--forced-in", type=str, default=None,
                   help="comma-separated column indices always included; default: the intercept")


def _add_data_args(p):
    p.add_argument("--input", required=False, help="CSV with response column 'y' first")
    p.add_argument("--intercept", action="store_true", help="prepend a column of ones")
    p.add_argument("--standardize", action="store_true", help="z-score predictors")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qpselect", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"qpselect {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    fit = sub.add_parser("fit", help="select variables on a CSV dataset")
    _add_data_args(fit)
    fit.add_argument("--family", default="linear", choices=["linear", "poisson", "negbin"])
    fit.add_argument("--method", default="qp", choices=["qp", "poisson", "nb"])
    fit.add_argument("--beta-draws", type=int, default=1000)
    fit.add_argument("--gamma-hex", action="store_true", help="also write gamma_draws.hex.gz")
    fit.add_argument("--cache-dump", action="store_true", help="also write cache.jsonl")
    _add_model_args(fit)
    fit.add_argument("--out", required=True)
    fit.add_argument("--manifest", default=None)

    sim = sub.add_parser("simulate", help="run the simulation scenarios")
    sim.add_argument("--scenario", default="counts")
    sim.add_argument("--n", type=int, nargs="+", default=[25])
    sim.add_argument("--reps", type=int, default=2)
    sim.add_argument("--methods", nargs="+", default=["qp"])
    sim.add_argument("--jobs", type=int, default=1)
    _add_model_args(sim)
    sim.add_argument("--out", required=True)
    sim.add_argument("--manifest", default=None)

    diag = sub.add_parser("diagnose", help="mean/variance diagnostics and WMSE cross-validation")
    _add_data_args(diag)
    diag.add_argument("--methods", nargs="+", default=["qp", "poisson", "nb"])
    diag.add_argument("--family", default="poisson", choices=["linear", "poisson"],
                      help="family used by the qp method")
    diag.add_argument("--folds", type=int, default=10)
    diag.add_argument("--rule", choices=["bfdr", "median"], default="bfdr")
    diag.add_argument("--min-count", type=int, default=20)
    _add_model_args(diag)
    diag.add_argument("--out", required=True)
    diag.add_argument("--manifest", default=None)

    orc = sub.add_parser("oracle-check", help="compare the sampler with exact enumeration")
    _add_data_args(orc)
    orc.add_argument("--family", default="linear", choices=["linear", "poisson", "negbin"])
    orc.add_argument("--theta", type=float, default=None, help="NB theta; estimated if omitted")
    _add_model_args(orc)
    orc.add_argument("--out", required=True)
    orc.add_argument("--manifest", default=None)
    return parser


_NON_CONFIG = {"out", "manifest", "verbose", "subcommand"}


def resolve_config(args) -> dict:
    if args.manifest:
        with open(args.manifest, encoding="utf-8") as fh:
            man = json.load(fh)
        if man.get("schema") != SCHEMA:
            raise InputError(f"unsupported manifest schema {man.get('schema')!r}")
        if man.get("subcommand") != args.subcommand:
            raise InputError(
                f"manifest is for {man.get('subcommand')!r}, not {args.subcommand!r}"
            )
        return dict(man["config"])
    return {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}


def write_manifest(out: Path, subcommand: str, config: dict):
    man = {"schema": SCHEMA, "subcommand": subcommand, "version": __version__, "config": config}
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")


def prior_from(cfg) -> PriorConfig:
    if cfg.get("fixed_w") is not None:
        sparsity = FixedW(cfg["fixed_w"])
    else:
        sparsity = BetaBinomial(cfg["beta_a"], cfg["beta_b"])
    return PriorConfig(cfg["slab_variance"], sparsity)


def run_from(cfg, seed) -> RunConfig:
    mode = {
        "qmle": FullModelQMLE(),
        "lasso": L1Regularized(),
    }.get(cfg["dispersion"])
    if cfg["dispersion"] == "fixed":
        if cfg.get("psi") is None:
            raise InputError("--dispersion fixed needs --psi")
        mode = FixedDispersion(cfg["psi"])
    forced = None
    if cfg.get("forced_in") not in (None, ""):
        try:
            forced = tuple(int(v) for v in str(cfg["forced_in"]).split(",") if v.strip())
        except ValueError:
            raise InputError(f"--forced-in must be comma-separated integers, got {cfg['forced_in']!r}") from None
    elif cfg.get("forced_in") == "":
        forced = ()
    try:
        return RunConfig(
            sweeps=cfg["sweeps"], burn_in=cfg["burn_in"], seed=seed, fdr_alpha=cfg["alpha"],
            newton_tol=cfg["newton_tol"], newton_max_iter=cfg["newton_max_iter"],
            cache_cap=cfg.get("cache_cap"), dispersion_mode=mode, forced_in=forced,
        )
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _load(cfg):
    if not cfg.get("input"):
        raise InputError("--input is required")
    try:
        return read_csv(cfg["input"], cfg.get("intercept", False), cfg.get("standardize", False))
    except FileNotFoundError as exc:
        raise InputError(f"input file not found: {exc.filename}") from None


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_fit(cfg: dict, out: Path):
    from .sampler import sample_beta_detail
    from .simbench import Method, fit_pipeline, select_both
    from .selection import select_bfdr, select_median

    d = _load(cfg)
    prior = prior_from(cfg)
    run = run_from(cfg, derive_seed(cfg["seed"], "fit", "chain"))
    method = Method.qp(cfg["family"]) if cfg["method"] == "qp" else method_from_name(cfg["method"])
    pipe = fit_pipeline(d, method, prior, run)
    out_s = pipe.output
    out_s.write_rb_ppi(out / "rb_ppi.csv")
    out_s.write_cumulative_ppi(out / "cumulative_ppi.csv")
    if cfg.get("gamma_hex"):
        out_s.write_gamma_hex(out / "gamma_draws.hex.gz")
    if cfg.get("cache_dump"):
        pipe.evaluator.cache.dump_jsonl(out / "cache.jsonl")

    free = np.ones(d.p, dtype=bool)
    free[list(pipe.forced)] = False
    sel = select_both(out_s.rb_ppi, pipe.forced, run.fdr_alpha)
    rules = {
        "median": select_median(out_s.rb_ppi[free]),
        "bfdr": select_bfdr(out_s.rb_ppi[free], run.fdr_alpha),
    }
    selection = {
        "family": pipe.family.name,
        "method": method.label,
        "psi": pipe.psi,
        "theta": pipe.theta,
        "columns": list(d.column_names),
        "forced_in": [d.column_names[j] for j in pipe.forced],
        "rb_ppi": [float(v) for v in out_s.rb_ppi],
        "rules": {
            name: {
                "implicit_threshold": rules[name].implicit_threshold,
                "alpha": rules[name].alpha,
                "selected": [int(v) for v in sel[name]],
                "selected_columns": [c for c, s in zip(d.column_names, sel[name]) if s],
            }
            for name in ("median", "bfdr")
        },
        "cache_stats": out_s.cache_stats,
        "visited_models": out_s.visited_models,
    }
    _write_json(out / "selection.json", selection)

    draws = sample_beta_detail(
        d, np.flatnonzero(sel["bfdr"]), pipe.family, prior, pipe.psi, cfg["beta_draws"],
        derive_seed(cfg["seed"], "fit", "beta"), evaluator=pipe.evaluator,
    )
    with open(out / "beta_samples.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(d.column_names)
        for row in draws.draws:
            w.writerow([repr(float(v)) for v in row])
    return selection


def cmd_simulate(cfg: dict, out: Path):
    if cfg["scenario"] not in SCENARIOS:
        raise InputError(f"unknown scenario {cfg['scenario']!r}; expected one of {list(SCENARIOS)}")
    fam = "poisson" if cfg["scenario"] == "counts" else "linear"
    methods = [method_from_name(m, fam) for m in cfg["methods"]]
    prior = prior_from(cfg)
    run = run_from(cfg, cfg["seed"])
    grid = run_scenario_grid(
        [cfg["scenario"]], cfg["n"], cfg["reps"], methods, prior, run,
        base_seed=derive_seed(cfg["seed"], "simulate"), jobs=max(1, cfg.get("jobs", 1)),
    )
    with open(out / "results.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "n", "method", "rule", "metric", "replicate", "mean", "se", "R"])
        for row in grid.table:
            key = (row["scenario"], row["n"], row["method"])
            reps = [r for r in grid.reports
                    if (r.scenario, r.n, r.method) == key and r.status == "ok"]
            for r in reps:
                val = getattr(r.metrics[row["rule"]], row["metric"])
                w.writerow([*key, row["rule"], row["metric"], r.replicate, repr(float(val)), "", 1])
            w.writerow([*key, row["rule"], row["metric"], "all",
                        repr(row["mean"]), repr(row["se"]), row["R"]])
    grid.write_jsonl(out / "replicates.jsonl")
    # wall times vary run to run, so they live apart from the reproducible outputs
    with open(out / "timing.jsonl", "w", encoding="utf-8") as fh:
        for r in grid.reports:
            fh.write(json.dumps({"scenario": r.scenario, "n": r.n, "replicate": r.replicate,
                                 "method": r.method, "wall_time": r.wall_time}) + "\n")
    failed = [r for r in grid.reports if r.status != "ok"]
    if failed:
        logger.warning("%d replicate runs failed; see replicates.jsonl", len(failed))
    return grid


def cmd_diagnose(cfg: dict, out: Path):
    from .diagnostics import binned_mean_variance, cv_wmse, fit_selected_model, write_summary_json

    d = _load(cfg)
    folds = cfg["folds"]
    if d.n < folds * 5:
        raise InputError(f"{folds}-fold CV needs n >= {folds * 5}, got n={d.n}")
    prior = prior_from(cfg)
    run = run_from(cfg, derive_seed(cfg["seed"], "diagnose", "chain"))
    methods = [method_from_name(m, cfg["family"]) for m in cfg["methods"]]
    fits = [fit_selected_model(d, m, prior, run, cfg["rule"]).model for m in methods]
    binned = binned_mean_variance(d, fits, min_count=cfg["min_count"])
    binned.write_csv(out / "binned.csv")
    rows = cv_wmse(d, methods, folds, derive_seed(cfg["seed"], "diagnose", "cv"), prior, run, cfg["rule"])
    write_summary_json(out / "summary.json", binned, rows)
    return binned, rows


def cmd_oracle_check(cfg: dict, out: Path):
    from .families import NegBinLog, family_from_name
    from .marginal import MarginalEvaluator, ModelCache
    from .quasilik import estimate_dispersion, estimate_nb_theta
    from .sampler import enumerate_exact, gibbs_run

    d = _load(cfg)
    if cfg.get("fixed_w") is None:
        raise InputError("oracle-check needs --fixed-w")
    prior = prior_from(cfg)
    run = run_from(cfg, derive_seed(cfg["seed"], "oracle-check", "chain"))
    fam = family_from_name(cfg["family"])
    if isinstance(fam, NegBinLog):
        fam = NegBinLog(cfg["theta"] if cfg.get("theta") else estimate_nb_theta(d))
    psi = estimate_dispersion(d, fam, run.dispersion_mode, run.forced_columns(d), run.seed)
    forced = run.forced_columns(d)
    ev = MarginalEvaluator(d, fam, psi, prior, ModelCache(run.cache_cap), run.newton_tol, run.newton_max_iter)
    exact = enumerate_exact(d, fam, prior, psi, forced, log_marginal=ev.log_marginal)
    samp = gibbs_run(d, fam, prior, run, psi, ev)
    freqs = samp.model_frequencies()
    tv = 0.5 * sum(abs(freqs.get(int(m), 0.0) - float(pr)) for m, pr in zip(exact.models, exact.probs))
    tv += 0.5 * sum(v for k, v in freqs.items() if k not in set(int(m) for m in exact.models))
    report = {
        "psi": psi,
        "columns": list(d.column_names),
        "exact_ppi": [float(v) for v in exact.ppi],
        "sampler_ppi": [float(v) for v in samp.rb_ppi],
        "max_abs_ppi_error": float(np.max(np.abs(exact.ppi - samp.rb_ppi))),
        "total_variation": float(tv),
        "models": [
            {"gamma": format(int(m), "x"), "exact": float(pr), "sampler": freqs.get(int(m), 0.0)}
            for m, pr in zip(exact.models, exact.probs)
        ],
    }
    _write_json(out / "oracle.json", report)
    return report


COMMANDS = {
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "diagnose": cmd_diagnose,
    "oracle-check": cmd_oracle_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.subcommand](cfg, out)
        write_manifest(out, args.subcommand, cfg)
    except (InputError, ValueError) as exc:
        print(f"qpselect: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, linalg.LinAlgError, FloatingPointError) as exc:
        print(f"qpselect: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
