"""Command-line front end: ``crtbounds {itt,bounds,simulate}``.

Every JSON output carries a top-level ``manifest`` recording the command,
input files (with SHA-256 digests), a hash of the effective configuration,
the seed, the package version and timestamps. Timestamps honour
``SOURCE_DATE_EPOCH`` so runs can be made byte-reproducible.

Exit codes: 0 success, 1 numeric or solver failure, 2 input or validation
failure.
"""
import argparse
import csv
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import bounds as bnd
from .classify import TARGETS, ConvergenceError, LearnerKind, SingularLearnerError
from .infer import BootstrapConfig, BootstrapError, cluster_bootstrap
from .itt import (InsufficientClustersError, SingularDesignError, estimate_hetero_itt,
                  estimate_overall_itt)
from .lpsolve import IterationLimitError
from .model import DataValidationError, load_csv, validate, write_csv
from .rng import stream
from . import sim

EXIT_OK, EXIT_NUMERIC, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    """Bad flags, files or configuration (exit code 2)."""


# ---------------------------------------------------------------- helpers

def _timestamp():
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return when.isoformat(timespec="seconds")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _dumps(obj):
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def manifest(command, inputs, config, seed, started):
    config = _jsonable(config)
    digest = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()
    return {"command": command,
            "inputs": [{"path": str(p), "sha256": _sha256(p)} for p in inputs],
            "config": config, "config_hash": digest, "seed": seed, "version": __version__,
            "timestamps": {"started": started, "finished": _timestamp()}}


def _write_csv(path, rows, columns):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _emit(payload, out_dir, stem, rows, columns):
    text = _dumps(payload)
    if out_dir is None:
        sys.stdout.write(text)
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(text, encoding="utf-8")
    _write_csv(out / f"{stem}.csv", rows, columns)


def _columns(text):
    if text is None:
        return None
    cols = tuple(c.strip() for c in text.split(",") if c.strip())
    return cols


def _load(path):
    if not Path(path).is_file():
        raise InputError(f"input file not found: {path}")
    data = load_csv(path)
    problems = validate(data)
    if problems:
        raise InputError("; ".join(f"{v.rule} at {v.where}: {v.message}" for v in problems))
    return data


def _check_columns(data, cols, flag):
    if cols is None:
        return
    unknown = [c for c in cols if c not in data.covariate_names]
    if unknown:
        raise InputError(f"{flag}: unknown covariate(s) {unknown}; available {list(data.covariate_names)}")


# ---------------------------------------------------------------- commands

_ITT_COLUMNS = ["estimand", "estimate", "se", "ci_low", "ci_high", "chi2", "p"]


def _itt_row(d):
    return {**d, "ci_low": d["ci"][0], "ci_high": d["ci"][1]}


def cmd_itt(args):
    started = _timestamp()
    data = _load(args.input)
    covs = _columns(args.covariates)
    _check_columns(data, covs, "--covariates")
    overall = estimate_overall_itt(data).to_dict()
    result = {"overall": overall}
    rows = [_itt_row(overall)]
    if covs is not None:
        het = estimate_hetero_itt(data, covs, intercept=not args.no_intercept).to_dict()
        result["heterogeneous"] = het
        rows += [_itt_row(c) for c in het["coefficients"]]
        jt = het["joint_test"]
        rows.append({"estimand": "joint_test", "chi2": jt["chi2"], "p": jt["p"]})
    config = {"covariates": covs, "intercept": not args.no_intercept}
    payload = {"manifest": manifest("itt", [args.input], config, None, started), "result": result}
    _emit(payload, args.out, "itt", rows, _ITT_COLUMNS)
    return EXIT_OK


_BOUND_COLUMNS = ["estimand", "method", "lower", "upper", "feasible", "ci_lower", "ci_upper",
                  "n_missing_replicates", "warnings"]


def cmd_bounds(args):
    started = _timestamp()
    data = _load(args.input)
    covs = _columns(args.covariates)
    strata = _columns(args.strata) or ()
    _check_columns(data, covs, "--covariates")
    _check_columns(data, strata, "--strata")
    try:
        kind = LearnerKind.parse(args.learner, args.lam)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if args.bootstrap < 0:
        raise InputError("--bootstrap must be >= 0")
    if not 0 < args.alpha < 1:
        raise InputError("--alpha must lie in (0, 1)")
    cfg = bnd.BoundsConfig(kind, covs, strata, args.noise_r, args.seed)
    if args.dump_lp is not None:
        Path(args.dump_lp).mkdir(parents=True, exist_ok=True)
    point = bnd.estimate_bounds(data, cfg, dump_dir=args.dump_lp)
    if args.dump_lp is not None:
        bnd.write_lp_inputs_csv(point.inputs, Path(args.dump_lp) / "lp_inputs.csv")

    ci = None
    if args.bootstrap > 0:
        bc = BootstrapConfig(args.bootstrap, args.alpha, args.seed, args.threads)
        ci = cluster_bootstrap(data, bnd.BoundsPipeline(cfg), bc, point=point)

    rows, result = [], {}
    for t in TARGETS:
        result[t] = {}
        for method, part in ((bnd.CLASSIFIER, point.classifier), (bnd.EXTENDED, point.extended),
                             (bnd.INTERSECTION, point.intersection)):
            b = part[t]
            if b is None:
                continue
            entry = b.to_dict()
            row = dict(entry, warnings=" | ".join(b.warnings))
            cs = ci[t].get(method) if ci is not None else None
            if cs is not None:
                entry["confidence_set"] = cs.to_dict()
                row.update(ci_lower=cs.lb_alpha2, ci_upper=cs.ub_1_alpha2,
                           n_missing_replicates=cs.n_missing)
            result[t][method] = entry
            rows.append(row)
    config = {"learner": kind.name, "lambda": kind.lam, "covariates": covs, "strata": strata,
              "noise_r": args.noise_r, "bootstrap": args.bootstrap, "alpha": args.alpha}
    payload = {"manifest": manifest("bounds", [args.input], config, args.seed, started),
               "result": {"bounds": result, "lp_inputs": point.inputs.to_dict(),
                          "outcome_transform": {"shift": point.transform.shift,
                                                "scale": point.transform.scale}}}
    _emit(payload, args.out, "bounds", rows, _BOUND_COLUMNS)
    return EXIT_OK


_TABLE1_COLUMNS = ["estimand", "truth", "mean_estimate", "bias", "sd", "mc_se", "mean_se",
                   "mean_var", "coverage", "mean_p"]
_TABLE3_COLUMNS = ["estimand", "method", "truth", "n", "mean_lower", "mean_upper",
                   "bound_coverage", "infeasible_share", "mean_ci_lower", "mean_ci_upper",
                   "ci_coverage"]


def cmd_simulate(args):
    started = _timestamp()
    inputs = []
    try:
        raw = {}
        if args.config is not None:
            if not Path(args.config).is_file():
                raise InputError(f"config file not found: {args.config}")
            inputs.append(args.config)
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
            if not isinstance(raw, dict):
                raise InputError("config must be a JSON object")
            unknown = set(raw) - set(sim.SimConfig.__dataclass_fields__)
            if unknown:
                raise InputError(f"unknown config keys {sorted(unknown)}")
        for flag, key in ((args.reps, "reps"), (args.seed, "seed"), (args.bootstrap, "bootstrap")):
            if flag is not None:
                raw[key] = flag
        if args.analyses is not None:
            raw["analyses"] = _columns(args.analyses)
        cfg = sim.SimConfig(**raw)
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise InputError(f"bad simulation config: {exc}") from exc
    if cfg.reps < 1:
        raise InputError("reps must be >= 1")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pop = sim.generate_population(cfg)
    if args.emit_data:
        write_csv(sim.randomize(pop, cfg.m, stream(cfg.seed, "randomization", 0)), out / "data.csv")
    t0 = time.perf_counter()
    report = sim.replicate(cfg, threads=args.threads, pop=pop)
    body = report.to_dict()
    body.pop("elapsed_seconds", None)
    man = manifest("simulate", inputs, cfg.to_dict(), cfg.seed, started)
    man["timestamps"]["elapsed_seconds"] = round(time.perf_counter() - t0, 3)
    (out / "report.json").write_text(_dumps({"manifest": man, "report": body}), encoding="utf-8")
    _write_csv(out / "table1.csv", report.table1_rows(), _TABLE1_COLUMNS)
    if report.bounds:
        _write_csv(out / "table3.csv", report.table3_rows(), _TABLE3_COLUMNS)
    if report.n_failed:
        print(f"{report.n_failed} of {report.n_reps} replications failed", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="crtbounds",
                                description="ITT estimation and compliance-type effect bounds for "
                                            "cluster randomized trials.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    it = sub.add_parser("itt", help="overall and heterogeneous ITT effects")
    it.add_argument("--input", required=True, help="study CSV (cluster_id, z, d, y, covariates...)")
    it.add_argument("--covariates", help="comma-separated covariates for the heterogeneous ITT")
    it.add_argument("--no-intercept", action="store_true", help="omit the constant column")
    it.add_argument("--out", help="output directory (default: JSON to stdout)")
    it.set_defaults(func=cmd_itt)

    bd = sub.add_parser("bounds", help="bounds on never-taker, always-taker and complier effects")
    bd.add_argument("--input", required=True)
    bd.add_argument("--learner", default="logistic", help="linear or logistic (default logistic)")
    bd.add_argument("--lambda", dest="lam", type=float, default=1e-3, help="ridge penalty")
    bd.add_argument("--covariates", help="classifier covariates (default: all)")
    bd.add_argument("--strata", help="binary covariates defining strata for extended bounds")
    bd.add_argument("--bootstrap", type=int, default=0, help="bootstrap replicates (0: none)")
    bd.add_argument("--alpha", type=float, default=0.05)
    bd.add_argument("--seed", type=int, default=0)
    bd.add_argument("--noise-r", type=float, default=None, help="override the noise scale r")
    bd.add_argument("--threads", type=int, default=1, help="worker processes for the bootstrap")
    bd.add_argument("--dump-lp", help="directory for LP matrices and plug-in inputs as CSV")
    bd.add_argument("--out")
    bd.set_defaults(func=cmd_bounds)

    sm = sub.add_parser("simulate", help="Monte Carlo replications on a synthetic trial")
    sm.add_argument("--config", help="JSON simulation config (default settings if omitted)")
    sm.add_argument("--reps", type=int)
    sm.add_argument("--seed", type=int)
    sm.add_argument("--bootstrap", type=int, help="bootstrap replicates per replication")
    sm.add_argument("--analyses", help="comma-separated subset of itt,hetero,bounds")
    sm.add_argument("--threads", type=int, default=1)
    sm.add_argument("--emit-data", action="store_true", help="write one realized trial as data.csv")
    sm.add_argument("--out", required=True)
    sm.set_defaults(func=cmd_simulate)
    return p


_NUMERIC = (SingularDesignError, ConvergenceError, SingularLearnerError, IterationLimitError,
            BootstrapError, np.linalg.LinAlgError, ArithmeticError, RuntimeError)
_INPUT = (InputError, DataValidationError, InsufficientClustersError, bnd.DegenerateStratumError,
          OSError)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args)
    except _INPUT as exc:
        print(f"crtbounds: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except _NUMERIC as exc:
        print(f"crtbounds: numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"crtbounds: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
