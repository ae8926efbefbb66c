"""Command-line surface: fit, select, predict, simulate, bench.

Every command writes into its --out directory only, leaves exactly one
manifest there, and is deterministic under a fixed seed.  Exit codes:
0 success, 1 validation/configuration, 2 numerical failure, 3 non-convergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import ColumnConfig, load_long_csv, validate
from .engines import fit_from_dict, fit_mfvb, fit_to_dict, fit_vmp
from .errors import ConfigurationError, NumericalError, ParseError, ValidationError
from .model import Hyperparameters
from .postprocess import (orthonormalize, predict_trajectory, write_function_csv,
                          write_scores_csv)
from .select import SelectionConfig, model_choice, rule_of_thumb_K, select_L_pve
from .simulate import (SimulationScenario, generate_dataset, run_replicates,
                       write_results_csv, write_truth)
from .dataset import write_long_csv
from .splines import build_basis

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_NONCONVERGED = 3


def _add_common(parser):
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=0,
                        help="worker processes for independent fits (0 = serial)")


def _add_columns(parser):
    parser.add_argument("--col-subject", default="subject")
    parser.add_argument("--col-variable", default="variable")
    parser.add_argument("--col-time", default="time")
    parser.add_argument("--col-value", default="value")


def _add_fit_options(parser):
    parser.add_argument("--engine", choices=["mfvb", "vmp"], default="mfvb")
    parser.add_argument("--num-components", type=int, default=10,
                        help="component upper bound used for inference")
    parser.add_argument("--num-splines", type=int, default=None,
                        help="fixed K for all variables; omit to select")
    parser.add_argument("--select-k", choices=["rule", "model"], default="rule")
    parser.add_argument("--k-min", type=int, default=5)
    parser.add_argument("--k-max", type=int, default=20)
    parser.add_argument("--pve-threshold", type=float, default=0.95)
    parser.add_argument("--grid-size", type=int, default=1000)
    parser.add_argument("--tol", type=float, default=1e-5)
    parser.add_argument("--max-iter", type=int, default=500)
    parser.add_argument("--sigma-beta", type=float, default=1e5)
    parser.add_argument("--half-cauchy-scale", type=float, default=1e5)
    parser.add_argument("--config", default=None,
                        help="JSON file with hyperparameter defaults (flags win)")
    parser.add_argument("--allow-nonconverged", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfpca",
        description="Variational Bayesian multivariate functional PCA")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a dataset and export the decomposition")
    p_fit.add_argument("--input", required=True, help="long-format CSV")
    _add_columns(p_fit)
    _add_fit_options(p_fit)
    _add_common(p_fit)

    p_sel = sub.add_parser("select", help="ELBO model choice over a (K, L) grid")
    p_sel.add_argument("--input", required=True)
    _add_columns(p_sel)
    p_sel.add_argument("--engine", choices=["mfvb", "vmp"], default="mfvb")
    p_sel.add_argument("--k-min", type=int, default=5)
    p_sel.add_argument("--k-max", type=int, default=20)
    p_sel.add_argument("--l-min", type=int, default=1)
    p_sel.add_argument("--l-max", type=int, default=10)
    p_sel.add_argument("--pve-threshold", type=float, default=0.95)
    p_sel.add_argument("--grid-size", type=int, default=1000)
    p_sel.add_argument("--tol", type=float, default=1e-5)
    p_sel.add_argument("--max-iter", type=int, default=500)
    _add_common(p_sel)

    p_pred = sub.add_parser("predict", help="per-subject trajectories with 95% bands")
    p_pred.add_argument("--fit-dir", required=True, help="output directory of a fit run")
    p_pred.add_argument("--subjects", default="all",
                        help="'all' or comma-separated subject ids")
    p_pred.add_argument("--grid-size", type=int, default=None)
    p_pred.add_argument("--num-samples", type=int, default=1000)
    _add_common(p_pred)

    p_sim = sub.add_parser("simulate", help="write a synthetic dataset and its truth")
    p_sim.add_argument("--scenario", required=True, help="scenario JSON file")
    p_sim.add_argument("--grid-size", type=int, default=200)
    _add_common(p_sim)

    p_bench = sub.add_parser("bench", help="replicate study: generate, fit, score")
    p_bench.add_argument("--scenario", required=True)
    p_bench.add_argument("--replicates", type=int, default=1)
    p_bench.add_argument("--methods", default="mfpca",
                         help="comma list from {mfpca, univariate}")
    p_bench.add_argument("--engine", choices=["mfvb", "vmp"], default="mfvb")
    p_bench.add_argument("--num-components", type=int, default=None,
                         help="component upper bound (default: truth + 2)")
    p_bench.add_argument("--select-k", choices=["rule", "model"], default="rule")
    p_bench.add_argument("--pve-threshold", type=float, default=0.95)
    p_bench.add_argument("--grid-size", type=int, default=400)
    p_bench.add_argument("--tol", type=float, default=1e-5)
    p_bench.add_argument("--max-iter", type=int, default=500)
    _add_common(p_bench)
    return parser


def _file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(outdir: Path, command: str, args: argparse.Namespace,
                    inputs: dict, outputs: list[str], timings: dict) -> None:
    manifest = {
        "command": command,
        "args": {k: v for k, v in vars(args).items() if k != "command"},
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "inputs": inputs,
        "outputs": outputs,
        "timings_s": timings,
    }
    with open(outdir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, default=str)


def _load_config_defaults(args) -> dict:
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            return json.load(fh)
    return {}


def _hyper_from_args(args, num_components: int) -> Hyperparameters:
    cfg = _load_config_defaults(args)
    base = {
        "num_components": num_components,
        "num_splines": getattr(args, "num_splines", None),
        "sigma_beta": getattr(args, "sigma_beta", 1e5),
        "half_cauchy_scale": getattr(args, "half_cauchy_scale", 1e5),
        "tol": args.tol,
        "max_iter": args.max_iter,
        "seed": args.seed,
    }
    for key in cfg:
        if key in base and f"--{key.replace('_', '-')}" not in sys.argv:
            base[key] = cfg[key]
    return Hyperparameters.from_dict(base)


def cmd_fit(args) -> int:
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    columns = ColumnConfig(subject=args.col_subject, variable=args.col_variable,
                           time=args.col_time, value=args.col_value)
    dataset = load_long_csv(args.input, columns)
    report = validate(dataset)
    if not report.passed:
        raise ValidationError("; ".join(report.problems))

    hyper = _hyper_from_args(args, args.num_components)
    if args.num_splines is not None:
        ks = [args.num_splines] * dataset.p
    elif args.select_k == "model":
        candidates = [(k, hyper.num_components)
                      for k in range(args.k_min, args.k_max + 1)]
        results = model_choice(dataset, candidates, hyper, engine=args.engine,
                               threads=args.threads)
        best = max(results, key=lambda c: c.posterior_prob)
        ks = [best.num_splines] * dataset.p
    else:
        ks = rule_of_thumb_K(dataset)
    bases = [build_basis(k) for k in ks]

    fitter = fit_mfvb if args.engine == "mfvb" else fit_vmp
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        raw = fitter(dataset, bases, hyper)
    if not raw.converged and not args.allow_nonconverged:
        print(f"fit did not converge in {hyper.max_iter} sweeps; "
              "rerun with --allow-nonconverged to keep outputs", file=sys.stderr)
        return EXIT_NONCONVERGED

    fit = orthonormalize(raw, args.grid_size)
    selected = select_L_pve(fit, args.pve_threshold)

    write_function_csv(fit, outdir / "functions.csv")
    write_scores_csv(fit, outdir / "scores.csv")
    with open(outdir / "pve.json", "w", encoding="utf-8") as fh:
        json.dump({"eigenvalues": fit.eigenvalues.tolist(),
                   "pve": fit.pve.tolist(),
                   "selected_L": selected,
                   "pve_threshold": args.pve_threshold,
                   "num_splines": ks,
                   "converged": raw.converged}, fh, indent=2)
    with open(outdir / "elbo_trace.csv", "w", encoding="utf-8") as fh:
        fh.write("sweep,elbo\n")
        for idx, val in enumerate(raw.elbo_trace, start=1):
            fh.write(f"{idx},{val:.17g}\n")
    with open(outdir / "fit_state.json", "w", encoding="utf-8") as fh:
        json.dump(fit_to_dict(raw), fh)
    outputs = ["functions.csv", "scores.csv", "pve.json", "elbo_trace.csv",
               "fit_state.json"]
    _write_manifest(outdir, "fit", args,
                    {"input": str(args.input), "sha256": _file_sha256(args.input),
                     "dataset_fingerprint": raw.dataset_fingerprint},
                    outputs, {"total": time.perf_counter() - t0})
    if not raw.converged:
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_select(args) -> int:
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    columns = ColumnConfig(subject=args.col_subject, variable=args.col_variable,
                           time=args.col_time, value=args.col_value)
    dataset = load_long_csv(args.input, columns)
    hyper = _hyper_from_args(args, args.l_max)
    config = SelectionConfig(k_min=args.k_min, k_max=args.k_max,
                             l_min=args.l_min, l_max=args.l_max,
                             pve_threshold=args.pve_threshold)
    candidates = [(k, l) for k in range(config.k_min, config.k_max + 1)
                  for l in range(config.l_min, config.l_max + 1)]
    results = model_choice(dataset, candidates, hyper, engine=args.engine,
                           threads=args.threads)
    with open(outdir / "model_choice.csv", "w", encoding="utf-8") as fh:
        fh.write("num_splines,num_components,elbo,posterior_prob,converged\n")
        for res in results:
            fh.write(f"{res.num_splines},{res.num_components},{res.elbo:.17g},"
                     f"{res.posterior_prob:.17g},{int(res.converged)}\n")

    # Scree values from one fit at the component upper bound.
    best_k = max(results, key=lambda c: c.posterior_prob).num_splines
    bases = [build_basis(best_k)] * dataset.p
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        raw = fit_mfvb(dataset, bases, hyper) if args.engine == "mfvb" \
            else fit_vmp(dataset, bases, hyper)
    fit = orthonormalize(raw, args.grid_size)
    with open(outdir / "pve_scree.json", "w", encoding="utf-8") as fh:
        json.dump({"num_splines": best_k,
                   "eigenvalues": fit.eigenvalues.tolist(),
                   "pve": fit.pve.tolist(),
                   "selected_L": select_L_pve(fit, config.pve_threshold)},
                  fh, indent=2)
    _write_manifest(outdir, "select", args,
                    {"input": str(args.input), "sha256": _file_sha256(args.input)},
                    ["model_choice.csv", "pve_scree.json"],
                    {"total": time.perf_counter() - t0})
    return EXIT_OK


def cmd_predict(args) -> int:
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    state_path = Path(args.fit_dir) / "fit_state.json"
    if not state_path.exists():
        raise ConfigurationError(f"no fit_state.json under {args.fit_dir}")
    with open(state_path, encoding="utf-8") as fh:
        raw = fit_from_dict(json.load(fh))
    grid_size = args.grid_size or 1000
    fit = orthonormalize(raw, grid_size)

    ids = list(fit.subject_ids)
    if args.subjects == "all":
        targets = ids
    else:
        targets = [s.strip() for s in args.subjects.split(",") if s.strip()]
        unknown = [s for s in targets if s not in ids]
        if unknown:
            raise ValidationError(
                f"unknown subject id(s) {unknown}; valid ids: {ids}")
    outputs = []
    for sid in targets:
        i = ids.index(sid)
        pred = predict_trajectory(fit, i, num_samples=args.num_samples)
        fname = f"trajectory_{sid}.csv"
        with open(outdir / fname, "w", encoding="utf-8") as fh:
            fh.write("variable,t,estimate,lo95,hi95\n")
            for j, name in enumerate(fit.variable_names):
                for g, t in enumerate(pred.times):
                    fh.write(f"{name},{t:.17g},{pred.estimate[j, g]:.17g},"
                             f"{pred.lower[j, g]:.17g},{pred.upper[j, g]:.17g}\n")
        outputs.append(fname)
    _write_manifest(outdir, "predict", args,
                    {"fit_state": str(state_path), "sha256": _file_sha256(state_path)},
                    outputs, {"total": time.perf_counter() - t0})
    return EXIT_OK


def cmd_simulate(args) -> int:
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    with open(args.scenario, encoding="utf-8") as fh:
        scenario = SimulationScenario.from_dict(json.load(fh))
    if args.seed:
        scenario = SimulationScenario.from_dict({**scenario.to_dict(), "seed": args.seed})
    dataset, truth = generate_dataset(scenario)
    write_long_csv(dataset, outdir / "dataset.csv")
    write_truth(truth, outdir, grid_size=args.grid_size)
    _write_manifest(outdir, "simulate", args,
                    {"scenario": str(args.scenario),
                     "sha256": _file_sha256(args.scenario)},
                    ["dataset.csv", "truth_functions.csv", "truth_scores.csv",
                     "truth_meta.json"],
                    {"total": time.perf_counter() - t0})
    return EXIT_OK


def cmd_bench(args) -> int:
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    with open(args.scenario, encoding="utf-8") as fh:
        scenario = SimulationScenario.from_dict(json.load(fh))
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in ("mfpca", "univariate")]
    if bad:
        raise ConfigurationError(f"unknown method(s) {bad}")
    l_max = args.num_components or scenario.num_components + 2
    hyper = Hyperparameters(num_components=l_max, tol=args.tol,
                            max_iter=args.max_iter, seed=args.seed)
    selection = SelectionConfig(
        pve_threshold=args.pve_threshold,
        k_strategy="model_choice" if args.select_k == "model" else "rule_of_thumb")
    rows = run_replicates(scenario, methods=methods, num_replicates=args.replicates,
                          hyper=hyper, selection=selection, engine=args.engine,
                          grid_size=args.grid_size, threads=args.threads)
    write_results_csv(rows, outdir / "results.csv")
    _write_manifest(outdir, "bench", args,
                    {"scenario": str(args.scenario),
                     "sha256": _file_sha256(args.scenario)},
                    ["results.csv"], {"total": time.perf_counter() - t0})
    return EXIT_OK


_COMMANDS = {
    "fit": cmd_fit,
    "select": cmd_select,
    "predict": cmd_predict,
    "simulate": cmd_simulate,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigurationError, ParseError, ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
