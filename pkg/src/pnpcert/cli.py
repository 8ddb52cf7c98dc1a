"""Command-line entry point: recover, certify, props, fixpoint, bench."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import props
from .bench import (
    ConfigError,
    build_setup,
    format_metrics,
    load_config,
    run_experiment,
    setup_certificate,
    write_reports,
)
from .certify import PairSampler
from .linops import spectral_norm
from .priors import PriorError, fixed_point_iterate
from .solvers import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECK = 0, 2, 3, 4


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_values("experiment", seed=args.seed)
    return cfg


def _out_dir(args, cfg):
    return args.out or cfg.get("output", "dir")


def _emit(rows, fmt, columns=None):
    if fmt == "json":
        print(json.dumps(rows, indent=2))
        return
    if columns is None:
        columns = list(rows[0]) if rows else []
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: "" if row[k] is None else row[k] for k in columns})
    sys.stdout.write(buf.getvalue())


def cmd_recover(args):
    cfg = _load(args).with_values("grid", ratios=[], num_lines=[])
    results = run_experiment(cfg)
    timing = cfg.get("output", "timing", False)
    out = _out_dir(args, cfg)
    rows = write_reports(results, out, timing) if out else [r.metrics_row(timing) for r in results]
    if args.format == "json":
        _emit(rows, "json")
    else:
        sys.stdout.write(format_metrics(rows))
    return EXIT_OK


def cmd_bench(args):
    cfg = _load(args)
    results = run_experiment(cfg, workers=args.workers)
    timing = cfg.get("output", "timing", False)
    out = _out_dir(args, cfg)
    rows = write_reports(results, out, timing) if out else [r.metrics_row(timing) for r in results]
    if args.format == "json":
        _emit(rows, "json")
    else:
        sys.stdout.write(format_metrics(rows))
    return EXIT_OK


def cmd_certify(args):
    cfg = _load(args)
    setup = build_setup(cfg)
    cert, _ = setup_certificate(cfg, setup, cfg.get("solver", "gamma"))
    text = cert.to_json()
    out = _out_dir(args, cfg)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "certificate.json").write_text(text + "\n")
    print(text)
    return EXIT_OK if cert.c < 1.0 else EXIT_CHECK


def cmd_props(args):
    cfg = _load(args)
    setup = build_setup(cfg)
    prior, op = setup.prior, setup.problem.op
    pairs = cfg.get("certify", "pairs", 1000)
    sampler = PairSampler("awgn-pairs", [setup.problem.x_true], count=pairs, seed=setup.seed)
    base = sampler.pairs()
    lam = spectral_norm(op).value
    tol = 1e-6 if prior.kind == "tv-prox" else 1e-9
    reports = [
        props.check_nonexpansive(prior.denoise, base, tol),
        props.check_cocoercive(prior.residual, 0.5, base, tol),
        props.check_cocoercive(op.normal, 1.0 / lam, base, 1e-9),
        props.check_gradstep_contraction(op, 1.0 / lam, 0.0, lam, base),
    ]
    if prior.alpha:
        reports.append(props.check_averaged(prior.denoise, base, alpha=prior.alpha, tol=tol))
    dicts = [r.to_dict() for r in reports]
    out = _out_dir(args, cfg)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        with open(Path(out) / "props.jsonl", "w") as fh:
            for d in dicts:
                fh.write(json.dumps(d) + "\n")
    if args.format == "csv":
        _emit([{"name": d["name"], "status": d["status"], "pairs": d["pairs"],
                "violations": d["violations"], "worst_margin": d["worst_margin"]} for d in dicts],
              "csv")
    else:
        for d in dicts:
            print(json.dumps(d))
    return EXIT_OK if all(r.status != "fail" for r in reports) else EXIT_CHECK


def cmd_fixpoint(args):
    cfg = _load(args)
    setup = build_setup(cfg)
    x_true = setup.problem.x_true
    sigma = args.sigma
    x0 = x_true + sigma * np.random.default_rng([setup.seed, 2]).standard_normal(x_true.size)
    run = fixed_point_iterate(setup.prior, x0, args.iters)
    rows = [{"iter": k, "residual_sq": float(v)} for k, v in enumerate(run.residual_sq)]
    out = _out_dir(args, cfg)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        with open(Path(out) / "fixpoint.csv", "w") as fh:
            fh.write("iter,residual_sq\n")
            for r in rows:
                fh.write(f"{r['iter']},{r['residual_sq']!r}\n")
    _emit(rows, args.format, ["iter", "residual_sq"])
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="pnpcert", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "recover": (cmd_recover, "run one experiment (grid ignored)"),
        "certify": (cmd_certify, "estimate constants and emit a certificate"),
        "props": (cmd_props, "check operator properties of the configured prior and operator"),
        "fixpoint": (cmd_fixpoint, "iterate the denoiser and record ||R(x^k)||^2"),
        "bench": (cmd_bench, "run the configured grid"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="override experiment seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        if name == "bench":
            p.add_argument("--workers", type=int, default=None)
        if name == "fixpoint":
            p.add_argument("--iters", type=int, default=50)
            p.add_argument("--sigma", type=float, default=0.1)
        p.set_defaults(func=fn)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be nonnegative", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, PriorError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
