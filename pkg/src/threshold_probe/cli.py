"""Command-line interface: simulate, fit, report, diagnose, gradcheck, ppc.

Exit codes: 0 success, 1 data error, 2 usage error, 3 convergence warning.
All randomness flows from --seed. Every successful run writes a manifest
JSON recording the config, input fingerprints, outputs, and wall time.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

import numpy as np

from . import __version__
from .analysis import (
    AnalysisError,
    decision_curve,
    disparity_report_dict,
    disparity_report_text,
    posterior_predictive_check,
    posterior_summary,
    uniform_disparity,
)
from .ingest import (
    IngestError,
    SchemaConfig,
    parse_dataset,
    serialize_dataset,
    standardize_features,
    validate_dataset,
)
from .model import ModelParams, ParamSpace, PriorConfig
from .sampler import (
    PosteriorSamples,
    SamplerConfig,
    SamplerError,
    load_draws,
    run_chains,
    save_draws,
)
from .synthgen import (
    DesignConfig,
    max_gradient_error,
    sample_dataset,
    sample_ground_truth,
)

EXIT_OK = 0
EXIT_DATA = 1
EXIT_USAGE = 2
EXIT_CONVERGENCE = 3


def _file_fingerprint(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_snapshot(args) -> dict:
    return {k: v for k, v in vars(args).items()
            if k not in ("func", "section", "subparser")
            and not callable(v)}


def _write_manifest(out_dir, subcommand, config, inputs, outputs, started):
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "input_fingerprints": {str(p): _file_fingerprint(p) for p in inputs},
        "output_paths": [str(p) for p in outputs],
        "wall_time_s": round(time.monotonic() - started, 3),
        "tool_version": __version__,
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _load_config_file(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _merge_config(args, section):
    """Apply TOML config values for flags the user left at their defaults."""
    if not getattr(args, "config", None):
        return
    data = _load_config_file(args.config)
    values = data.get(section, data)
    for key, value in values.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            continue
        default = args.subparser.get_default(dest)
        if getattr(args, dest) == default:
            setattr(args, dest, value)


def _schema_from_args(args) -> SchemaConfig:
    if args.schema:
        with open(args.schema, "rb") as fh:
            raw = tomllib.load(fh)
        kwargs = {}
        for k, v in raw.items():
            if k == "feature_columns":
                continue
            if k in ("true_values", "false_values", "missing_tokens"):
                kwargs[k] = frozenset(v)
            else:
                kwargs[k] = v
        return SchemaConfig(feature_columns=tuple(raw["feature_columns"]),
                            **kwargs)
    return SchemaConfig(feature_columns=tuple(args.features.split(",")))


def _read_dataset(args):
    schema = _schema_from_args(args)
    with open(args.data, "rb") as fh:
        data, report = parse_dataset(fh, schema)
    issues = validate_dataset(data)
    errors = [i for i in issues if i.level == "error"]
    if errors:
        for issue in errors:
            print(f"error: {issue.message}", file=sys.stderr)
        raise IngestError("dataset validation failed")
    for issue in issues:
        if issue.level == "warning":
            print(f"warning: {issue.message}", file=sys.stderr)
    return data, report, schema


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args, parser) -> int:
    started = time.monotonic()
    design = DesignConfig(
        n_judges=args.judges,
        groups=tuple(args.groups.split(",")),
        cases_per_judge=args.cases_per_judge,
        d=args.d,
        seed=args.seed,
    )
    prior = PriorConfig()
    truth = sample_ground_truth(design, prior)
    if args.group_gap is not None:
        # deterministic cross-group offset: every later group's threshold is
        # the first group's draw minus gap * group_index, so the per-judge
        # gap is exact regardless of the hierarchy draw
        groups = tuple(design.groups)
        thresholds = dict(truth.judges.thresholds)
        for (judge, group) in list(thresholds):
            g = groups.index(group)
            if g:
                thresholds[(judge, group)] = (
                    thresholds[(judge, groups[0])] - args.group_gap * g)
        truth = ModelParams(
            skip=truth.skip,
            judges=type(truth.judges)(thresholds, truth.judges.log_sharpness),
            hyper=truth.hyper,
        )
    data = sample_dataset(truth, design)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "cases.csv"
    csv_path.write_text(serialize_dataset(data))
    space = ParamSpace.from_dataset(data)
    truth_path = out / "truth.json"
    with open(truth_path, "w") as fh:
        json.dump(
            {
                "names": space.names(),
                "flat": [float(x) for x in space.flatten(truth)],
                "design": {
                    "n_judges": design.n_judges,
                    "groups": list(design.groups),
                    "cases_per_judge": design.cases_per_judge,
                    "d": design.d,
                    "seed": design.seed,
                },
            },
            fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "simulate", _config_snapshot(args), [],
                    [csv_path, truth_path], started)
    print(f"wrote {len(data.cases)} cases to {csv_path}")
    return EXIT_OK


def cmd_fit(args, parser) -> int:
    started = time.monotonic()
    data, report, schema = _read_dataset(args)
    if args.standardize:
        data, warns = standardize_features(data)
        for w in warns:
            print(f"warning: {w}", file=sys.stderr)
    config = SamplerConfig(
        chains=args.chains, warmup_iters=args.warmup, sample_iters=args.samples,
        thin=args.thin, seed=args.seed, init_strategy=args.init,
        skip_block_mode=args.skip_block_mode,
    )
    samples = run_chains(data, config)
    summaries = posterior_summary(samples)
    max_rhat = max(s.r_hat for s in summaries)
    min_ess = min(s.ess for s in summaries)
    diag = {
        "max_r_hat": max_rhat,
        "min_ess": min_ess,
        "ingest": {"kept": report.kept_rows, "dropped": report.dropped},
    }
    out = Path(args.out)
    draws_path, meta_path = save_draws(samples, out, diagnostics=diag)
    _write_manifest(out, "fit", _config_snapshot(args),
                    [args.data], [draws_path, meta_path], started)
    print(f"max split R-hat: {max_rhat:.4f}")
    print(f"min ESS:         {min_ess:.1f}")
    if max_rhat > 1.1:
        print("warning: chains have not converged (max R-hat > 1.1)",
              file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_report(args, parser) -> int:
    started = time.monotonic()
    samples = load_draws(args.draws)
    try:
        rep = uniform_disparity(samples, args.group_a, args.group_b)
    except AnalysisError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "disparity.json"
    with open(json_path, "w") as fh:
        json.dump(disparity_report_dict(rep), fh, indent=2, sort_keys=True)
        fh.write("\n")
    text_path = out / "disparity.txt"
    text_path.write_text(disparity_report_text(rep))

    p_grid = np.linspace(0.01, 0.99, 99)
    curve_paths = []
    for judge in sorted(rep.per_judge):
        path = out / f"decision_curve_{judge}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["p", *(f"{c}_{g}" for g in (args.group_a, args.group_b)
                                    for c in ("mean", "lo90", "hi90"))])
            curves = {g: decision_curve(samples, judge, g, p_grid)
                      for g in (args.group_a, args.group_b)}
            for i, p in enumerate(p_grid):
                row = [f"{p:.6g}"]
                for g in (args.group_a, args.group_b):
                    _, mean, lo, hi = curves[g][i]
                    row += [f"{mean:.6g}", f"{lo:.6g}", f"{hi:.6g}"]
                writer.writerow(row)
        curve_paths.append(path)
    _write_manifest(out, "report", _config_snapshot(args),
                    [Path(args.draws) / "draws.csv"],
                    [json_path, text_path, *curve_paths], started)
    print(disparity_report_text(rep))
    return EXIT_OK


def cmd_diagnose(args, parser) -> int:
    samples = load_draws(args.draws)
    summaries = posterior_summary(samples)
    print(f"{'parameter':<40} {'mean':>10} {'sd':>10} {'r_hat':>8} {'ess':>10}")
    for s in summaries:
        print(f"{s.name:<40} {s.mean:>10.4f} {s.sd:>10.4f} "
              f"{s.r_hat:>8.4f} {s.ess:>10.1f}")
    max_rhat = max(s.r_hat for s in summaries)
    print(f"max split R-hat: {max_rhat:.4f}")
    return EXIT_CONVERGENCE if max_rhat > 1.1 else EXIT_OK


def cmd_gradcheck(args, parser) -> int:
    err = max_gradient_error(n_instances=args.instances, seed=args.seed)
    print(f"max relative gradient error over {args.instances} instances: "
          f"{err:.3e}")
    return EXIT_OK if err < 1e-5 else EXIT_DATA


def cmd_ppc(args, parser) -> int:
    started = time.monotonic()
    samples = load_draws(args.draws)
    data, report, schema = _read_dataset(args)
    if args.standardize:
        data, _ = standardize_features(data)
    try:
        rep = posterior_predictive_check(samples, data, seed=args.seed,
                                         n_rep=args.n_rep)
    except AnalysisError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "ppc.json"
    payload = {
        "cells": [
            {
                "judge": c.judge, "group": c.group, "n_cases": c.n_cases,
                "observed_rate": c.observed_rate,
                "predictive_mean": c.predictive_mean,
                "predictive_ci90": list(c.predictive_ci90),
                "tail_probability": c.tail_probability,
            }
            for c in rep.cells
        ],
        "skipped_cells": [list(c) for c in rep.skipped_cells],
    }
    if rep.skip_rate_check:
        c = rep.skip_rate_check
        payload["skip_rate"] = {
            "observed": c.observed_rate, "predictive_mean": c.predictive_mean,
            "predictive_ci90": list(c.predictive_ci90),
            "tail_probability": c.tail_probability,
        }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "ppc", _config_snapshot(args),
                    [args.data], [path], started)
    worst = min((c.tail_probability for c in rep.cells), default=1.0)
    print(f"{len(rep.cells)} cells checked; worst tail probability {worst:.4f}")
    if rep.skipped_cells:
        print(f"note: {len(rep.skipped_cells)} empty cells omitted")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------


def _add_data_args(p):
    p.add_argument("--data", required=True, help="input cases CSV")
    p.add_argument("--schema", help="TOML schema file (column names)")
    p.add_argument("--features", default="x0,x1,x2",
                   help="comma-separated feature column names (ignored with --schema)")
    p.add_argument("--standardize", action="store_true",
                   help="standardize features before fitting")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="threshold-probe",
        description="Hierarchical threshold model of cash-bail decisions",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--judges", type=int, default=50)
    p.add_argument("--groups", default="black,white")
    p.add_argument("--cases-per-judge", type=int, default=1000)
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--group-gap", type=float, default=None,
                   help="subtract this from tau for each later group (disparity)")
    p.add_argument("--config", help="TOML config file (flags win)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate, section="simulate", subparser=p)

    p = sub.add_parser("fit", help="fit the model to a cases CSV")
    _add_data_args(p)
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--warmup", type=int, default=1000)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", default="prior_draw",
                   choices=["prior_draw", "zero", "jittered_map"])
    p.add_argument("--skip-block-mode", default="rwm", choices=["rwm", "mala"])
    p.add_argument("--config", help="TOML config file (flags win)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit, section="fit", subparser=p)

    p = sub.add_parser("report", help="disparity report from saved draws")
    p.add_argument("--draws", required=True, help="directory with draws.csv")
    p.add_argument("--group-a", default="black")
    p.add_argument("--group-b", default="white")
    p.add_argument("--config", help="TOML config file (flags win)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report, section="report", subparser=p)

    p = sub.add_parser("diagnose", help="R-hat / ESS table for saved draws")
    p.add_argument("--draws", required=True)
    p.set_defaults(func=cmd_diagnose, section="diagnose", subparser=p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck, section="gradcheck", subparser=p)

    p = sub.add_parser("ppc", help="posterior predictive check")
    p.add_argument("--draws", required=True)
    _add_data_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-rep", type=int, default=200)
    p.add_argument("--config", help="TOML config file (flags win)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ppc, section="ppc", subparser=p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _merge_config(args, args.section)
        return args.func(args, parser)
    except IngestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SamplerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
