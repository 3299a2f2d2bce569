"""Command-line interface: ``aftgof {fit,gof,plotdata,simulate}``.

Exit codes: 0 success, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, kernels
from .data import DataError, SurvivalDataset, load_csv, standardize
from .estimate import ESTIMATORS, MULTIPLIERS, ConvergenceError, IdentifiabilityError, fit, usable
from .gof import DEFAULT_K, parse_test, run_tests
from .perturb import SENSITIVITIES, PathFailureError
from .simulate import HARNESS_ESTIMATORS, HARNESS_TESTS, ScenarioConfig, run_harness

log = logging.getLogger("aftgof")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    """Bad arguments or configuration (exit code 2)."""


def _threads_default() -> int:
    raw = os.environ.get("AFTGOF_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest(args, **extra) -> dict:
    """Everything needed to rerun a command and get identical outputs."""
    m = {
        "command": args.command,
        "argv": list(getattr(args, "argv", [])),
        "versions": {"aftgof": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version(), "kernel_backend": kernels.BACKEND},
    }
    for key in ("seed", "paths", "estimator", "grid_cap", "multiplier", "sensitivity"):
        if hasattr(args, key):
            m[key] = getattr(args, key)
    if getattr(args, "input", None):
        m["input"] = str(args.input)
        m["input_sha256"] = _sha256(args.input)
    m.update(extra)
    return m


def _write_json(obj, path) -> None:
    text = json.dumps(obj, indent=2)
    if path is None or str(path) == "-":
        sys.stdout.write(text + "\n")
    else:
        Path(path).write_text(text + "\n", encoding="utf-8")


def _manifest_path(args, default_stem: str) -> Path | None:
    if args.manifest:
        return Path(args.manifest)
    if args.output and str(args.output) != "-":
        out = Path(args.output)
        return out.with_name(out.stem + ".manifest.json")
    return Path(f"{default_stem}.manifest.json") if args.write_manifest else None


def _load(args) -> tuple[SurvivalDataset, dict | None]:
    covs = _covariate_list(args)
    data = load_csv(args.input, args.time_col, args.status_col, covs)
    if not args.standardize:
        return data, None
    data, rec = standardize(data, exempt_binary=args.exempt_binary)
    return data, rec.to_dict() | {"record": rec}


def _covariate_list(args) -> list[str]:
    if args.covariates:
        return [c.strip() for c in args.covariates.split(",") if c.strip()]
    try:
        with open(args.input, newline="", encoding="utf-8") as fh:
            header = [h.strip() for h in next(csv.reader(fh))]
    except FileNotFoundError:
        raise DataError(f"file not found: {args.input}") from None
    except StopIteration:
        raise DataError(f"{args.input} is empty") from None
    covs = [h for h in header if h not in (args.time_col, args.status_col)]
    if not covs:
        raise DataError("no covariate columns found")
    return covs


def _fit_payload(model, data: SurvivalDataset, std: dict | None) -> dict:
    out = model.to_dict()
    out["data"] = data.summary()
    if std is not None:
        rec = std.pop("record")
        out["beta_standardized"] = out["beta"]
        out["beta_original"] = rec.coefficients_to_original(model.beta).tolist()
        out["standardization"] = std
    return out


def cmd_fit(args) -> int:
    data, std = _load(args)
    model = fit(data, args.estimator)
    payload = _fit_payload(model, data, std)
    _write_json(payload, args.output)
    mpath = _manifest_path(args, "fit")
    if mpath:
        _write_json(manifest(args), mpath)
    if not usable(model):
        raise ConvergenceError(f"{model.estimator} did not converge: {model.message}")
    return EXIT_OK


def _tests_from_args(args, data: SurvivalDataset) -> list:
    tests = []
    for t in args.test or ["omni"]:
        if t == "all-forms":
            tests.extend(("form", q) for q in range(data.p))
        else:
            try:
                tests.append(parse_test(t, data.names))
            except ValueError as exc:
                raise InputError(str(exc)) from None
    return tests


def _run_gof(args):
    if args.paths < 1:
        raise InputError("--paths must be at least 1")
    data, std = _load(args)
    tests = _tests_from_args(args, data)
    anchor = fit(data, args.estimator)
    reports = run_tests(data, args.estimator, tests, (args.std,), args.paths, args.seed,
                        grid_cap=args.grid_cap, distribution=args.multiplier,
                        threads=args.threads, anchor=anchor, sensitivity=args.sensitivity)
    return data, std, anchor, reports


def _summary_line(rep) -> str:
    kind = "standardized" if rep.standardized else "unstandardized"
    return (f"{rep.test} ({kind}, {rep.estimator}): sup = {rep.W_obs_sup:.4f}, "
            f"p = {rep.p_value:.3f} (K_effective = {rep.K_effective} of {rep.K})")


def cmd_gof(args) -> int:
    data, std, anchor, reports = _run_gof(args)
    payload = {"fit": _fit_payload(anchor, data, std),
               "reports": [r.to_dict(include_plot=False) for r in reports]}
    _write_json(payload, args.output)
    if args.output and str(args.output) != "-":
        for rep in reports:
            print(_summary_line(rep))
    if args.plot_csv:
        _write_plot_csvs(reports, args.plot_csv)
    if args.svg:
        _write_svgs(reports, args.svg)
    mpath = _manifest_path(args, "gof")
    if mpath:
        _write_json(manifest(args, tests=[r.test for r in reports]), mpath)
    return EXIT_OK


def _numbered(path: str, rep, many: bool) -> Path:
    p = Path(path)
    if not many:
        return p
    tag = rep.test.replace(":", "_")
    return p.with_name(f"{p.stem}_{tag}{p.suffix}")


def _write_plot_csvs(reports, path) -> None:
    for rep in reports:
        rep.write_plot_csv(_numbered(path, rep, len(reports) > 1))


def _write_svgs(reports, path) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise InputError("--svg needs matplotlib (pip install aftgof[plot])") from None
    for rep in reports:
        pl = rep.plot_payload
        fig, ax = plt.subplots(figsize=(6, 4))
        for null_path in pl["paths"]:
            ax.step(pl["x"], null_path, where="post", color="0.7", lw=0.6)
        ax.step(pl["x"], pl["observed"], where="post", color="tab:red", lw=1.2)
        ax.set_xlabel(pl["x_label"].replace("_", " "))
        ax.set_ylabel("standardized W" if rep.standardized else "W")
        ax.set_title(f"{rep.test}: p = {rep.p_value:.3f}")
        fig.tight_layout()
        fig.savefig(_numbered(path, rep, len(reports) > 1), format="svg")
        plt.close(fig)


def cmd_plotdata(args) -> int:
    _, _, _, reports = _run_gof(args)
    target = args.output if args.output and str(args.output) != "-" else None
    if target is None:
        w = csv.writer(sys.stdout, lineterminator="\n")
        for rep in reports:
            w.writerow(["test", "path_id", rep.plot_payload["x_label"], "value"])
            w.writerows((rep.test, pid, x, repr(v)) for pid, x, v in rep.plot_rows())
    else:
        _write_plot_csvs(reports, target)
    if args.svg:
        _write_svgs(reports, args.svg)
    mpath = _manifest_path(args, "plotdata")
    if mpath:
        _write_json(manifest(args, tests=[r.test for r in reports]), mpath)
    return EXIT_OK


SIM_KEYS = {
    "scenario": str, "n": int, "gamma": float, "censoring": float, "reps": int,
    "paths": int, "seed": int, "tests": str, "estimators": str, "grid_cap": int,
    "processes": int, "standardized": str, "sensitivity": str,
}


def read_sim_config(path) -> dict:
    """Parse a ``key = value`` file; list values are comma-separated."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        parser.read_string("[run]\n" + Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise InputError(f"bad config file {path}: {exc}") from None
    out = {}
    for key, raw in parser["run"].items():
        key = key.replace("-", "_")
        if key not in SIM_KEYS:
            raise InputError(f"unknown config key {key!r}")
        out[key] = raw.strip()
    return out


def _split(raw, conv, key):
    try:
        return [conv(v.strip()) for v in str(raw).split(",") if v.strip()]
    except ValueError:
        raise InputError(f"bad value for {key}: {raw!r}") from None


def _sim_settings(args) -> dict:
    cfg = read_sim_config(args.config) if args.config else {}
    for key in SIM_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    s = {
        "scenario": _split(cfg.get("scenario", "S1"), str, "scenario"),
        "n": _split(cfg.get("n", "100"), int, "n"),
        "gamma": _split(cfg.get("gamma", "0"), float, "gamma"),
        "censoring": _split(cfg.get("censoring", "0.2"), float, "censoring"),
        "tests": _split(cfg.get("tests", ",".join(HARNESS_TESTS)), str, "tests"),
        "estimators": _split(cfg.get("estimators", ",".join(HARNESS_ESTIMATORS)), str, "estimators"),
        "standardized": _split(cfg.get("standardized", "std,unstd"), str, "standardized"),
    }
    for key, default in (("reps", 200), ("paths", 200), ("seed", 0), ("processes", 1), ("grid_cap", 200)):
        try:
            s[key] = int(cfg.get(key, default))
        except ValueError:
            raise InputError(f"bad value for {key}: {cfg[key]!r}") from None
    bad = [t for t in s["tests"] if t not in HARNESS_TESTS]
    if bad:
        raise InputError(f"unknown harness test(s) {bad}; use {HARNESS_TESTS}")
    bad = [e for e in s["estimators"] if e not in ESTIMATORS]
    if bad:
        raise InputError(f"unknown estimator(s) {bad}")
    flags = {"std": True, "unstd": False}
    if any(v not in flags for v in s["standardized"]):
        raise InputError("standardized must list std and/or unstd")
    s["standardized"] = [flags[v] for v in s["standardized"]]
    s["sensitivity"] = str(cfg.get("sensitivity", "difference"))
    if s["sensitivity"] not in SENSITIVITIES:
        raise InputError(f"sensitivity must be one of {SENSITIVITIES}")
    if s["reps"] < 1 or s["paths"] < 1:
        raise InputError("reps and paths must be at least 1")
    return s


def cmd_simulate(args) -> int:
    s = _sim_settings(args)
    try:
        configs = [ScenarioConfig(sc, n, g, c) for sc in s["scenario"] for n in s["n"]
                   for g in s["gamma"] for c in s["censoring"]]
    except ValueError as exc:
        raise InputError(str(exc)) from None
    result = run_harness(configs, reps=s["reps"], K=s["paths"], seed=s["seed"],
                         tests=s["tests"], estimators=s["estimators"],
                         standardized=s["standardized"], grid_cap=s["grid_cap"],
                         processes=s["processes"], sensitivity=s["sensitivity"])
    table = result.table_csv()
    if args.output and str(args.output) != "-":
        Path(args.output).write_text(table, encoding="utf-8")
    else:
        sys.stdout.write(table)
    if args.summary:
        _write_json(result.summary(), args.summary)
    args.seed, args.paths, args.grid_cap = s["seed"], s["paths"], s["grid_cap"]
    mpath = _manifest_path(args, "simulate")
    if mpath:
        _write_json(manifest(args, settings=s), mpath)
    empty = [c for c in result.cells if c.reps == 0]
    for c in empty:
        log.error("cell %s n=%d gamma=%g %s/%s has no successful replicates",
                  c.scenario, c.n, c.gamma, c.test, c.estimator)
    return EXIT_NUMERIC if empty else EXIT_OK


def _add_data_args(p) -> None:
    p.add_argument("--input", "-i", required=True, help="CSV file with a header row")
    p.add_argument("--time-col", default="time")
    p.add_argument("--status-col", default="status")
    p.add_argument("--covariates", help="comma-separated covariate columns (default: all others)")
    p.add_argument("--estimator", "-e", choices=ESTIMATORS, default="mis")
    p.add_argument("--standardize", action="store_true",
                   help="centre and scale covariates before fitting")
    p.add_argument("--exempt-binary", action="store_true",
                   help="with --standardize, leave two-valued covariates as they are")


def _add_output_args(p) -> None:
    p.add_argument("--output", "-o", help="output path (default: stdout)")
    p.add_argument("--manifest", help="manifest path (default: next to --output)")
    p.add_argument("--write-manifest", action="store_true",
                   help="write a manifest in the working directory when printing to stdout")


def _add_test_args(p) -> None:
    p.add_argument("--test", "-t", action="append",
                   help="omni, link, form:<covariate> or all-forms; repeatable (default: omni)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--std", dest="std", action="store_true", default=True,
                   help="standardized statistic (default)")
    g.add_argument("--unstd", dest="std", action="store_false", help="unstandardized statistic")
    p.add_argument("--paths", "-K", type=int, default=DEFAULT_K, help="number of resampled paths")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-cap", type=int, default=200,
                   help="max covariate thresholds in the omnibus grid (0 = no cap)")
    p.add_argument("--multiplier", choices=MULTIPLIERS, default="exponential")
    p.add_argument("--sensitivity", choices=SENSITIVITIES, default="difference",
                   help="how the paths account for estimating beta (default: difference)")
    p.add_argument("--threads", type=int, default=_threads_default(),
                   help="worker threads for perturbed fits (default: $AFTGOF_THREADS or 1)")
    p.add_argument("--svg", help="write the path overlay figure as SVG")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aftgof", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"aftgof {__version__}")
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit an AFT model and print the coefficients as JSON")
    _add_data_args(p)
    _add_output_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("gof", help="run goodness-of-fit tests and print a JSON report")
    _add_data_args(p)
    _add_test_args(p)
    _add_output_args(p)
    p.add_argument("--plot-csv", help="also write observed and null paths as tidy CSV")
    p.set_defaults(func=cmd_gof)

    p = sub.add_parser("plotdata", help="emit observed and first 50 null paths as tidy CSV")
    _add_data_args(p)
    _add_test_args(p)
    _add_output_args(p)
    p.set_defaults(func=cmd_plotdata)

    p = sub.add_parser("simulate", help="rejection rates over simulation scenarios")
    p.add_argument("--config", "-c", help="key = value file (flags override it)")
    p.add_argument("--scenario", help="S1 and/or S2, comma-separated")
    p.add_argument("--n", help="sample sizes, comma-separated")
    p.add_argument("--gamma", help="quadratic effects, comma-separated")
    p.add_argument("--censoring", help="target censoring rates, comma-separated")
    p.add_argument("--reps", type=int)
    p.add_argument("--paths", "-K", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tests", help=f"subset of {','.join(HARNESS_TESTS)}")
    p.add_argument("--estimators", help="comma-separated estimators")
    p.add_argument("--standardized", help="std and/or unstd")
    p.add_argument("--grid-cap", type=int)
    p.add_argument("--processes", type=int)
    p.add_argument("--sensitivity", choices=SENSITIVITIES)
    p.add_argument("--summary", help="write the summary JSON (rates and MC standard errors)")
    _add_output_args(p)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    args.argv = argv
    if getattr(args, "grid_cap", None) == 0:
        args.grid_cap = None
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (DataError, IdentifiabilityError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConvergenceError, PathFailureError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BrokenPipeError:
        # downstream reader (e.g. ``head``) closed early
        sys.stdout = None
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
