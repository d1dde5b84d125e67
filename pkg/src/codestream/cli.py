"""Command-line front end.

Example usage::

    codestream train --config configs/case_study.yaml
    codestream sweep --config configs/case_study.yaml --profile ci
    codestream shift-study --config configs/case_study.yaml --exact-prior
    codestream plot results/case_study/sweep.csv

Exit codes: 0 on success, 2 for usage or configuration errors (including missing files), 3 when a
run fails.
"""

import argparse
import csv
from dataclasses import replace
import logging
import os
import sys

import numpy as np

from . import __version__, experiments, plot, samplers
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, PROFILES, load_config
from .metrics import SchemaError
from .trainer import MixtureDenoiser, train

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FAILURE = 3

CHECKPOINT_NAME = "checkpoint.json"


class UsageError(Exception):
    pass


def _experiment(args):
    exp = load_config(args.config, args.profile)
    if getattr(args, 'seed', None) is not None:
        exp = replace(exp, seed=args.seed)
    if getattr(args, 'workers', None) is not None:
        exp = replace(exp, workers=args.workers)
    return exp


def _out_dir(args, exp):
    return args.out or exp.output_dir


def _model(args, exp):
    "The ε-predictor to sample with: the trained checkpoint, or the exact prior denoiser."
    sched = exp.schedule.build()
    if args.exact_prior:
        log.info("Using the exact mixture denoiser (T=%d)", sched.T)
        return MixtureDenoiser(exp.prior), sched
    path = args.checkpoint or os.path.join(exp.output_dir, CHECKPOINT_NAME)
    if not os.path.exists(path):
        raise UsageError(f"{path}: no such checkpoint (run `codestream train` first or pass --exact-prior)")
    model, trained = load_checkpoint(path)
    if trained.T != sched.T:
        raise UsageError(f"{path} was trained with T={trained.T}, but the {exp.profile} profile uses T={sched.T}")
    return model, trained


def cmd_train(args):
    exp = _experiment(args)
    cfg = exp.train if args.seed is None else replace(exp.train, seed=args.seed)
    out = _out_dir(args, exp)
    os.makedirs(out, exist_ok=True)
    sched = exp.schedule.build()
    model, trace = train(exp.model.build(), exp.prior, sched, cfg)
    save_checkpoint(model, sched, os.path.join(out, CHECKPOINT_NAME))
    trace_path = os.path.join(out, "loss_trace.csv")
    with open(trace_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "loss"])
        writer.writerows((epoch, repr(loss)) for epoch, loss in enumerate(trace, start=1))
    log.info("Wrote %s", trace_path)


def _write_points(path, points, header=("x", "y")):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row] for row in points)
    log.info("Wrote %d rows to %s", len(points), path)


def cmd_sample(args):
    exp = _experiment(args)
    model, sched = _model(args, exp)
    out = args.out or os.path.join(exp.output_dir, "samples.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    if args.trajectory_every:
        states = samplers.base_trajectory(model, sched, args.n, exp.seed, every=args.trajectory_every)
        rows = [(t, run, x[0], x[1]) for t, xs in states for run, x in enumerate(xs)]
        _write_points(out, rows, header=("t", "run", "x", "y"))
    else:
        _write_points(out, samplers.base_sample(model, sched, args.n, exp.seed, workers=exp.workers))


def cmd_guide(args):
    exp = _experiment(args)
    model, sched = _model(args, exp)
    try:
        point = samplers.GuidanceConfig(
            method=args.method, N=args.N, B=args.B, eta=args.eta, scale=args.scale,
            x_ref=tuple(args.x_ref) if args.x_ref else None, seed=exp.seed,
            exact_gradient=not args.frozen_gradient, temperature=args.temperature)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    x_ref = None
    if point.method == 'CoDeEta' and point.x_ref is None:
        x_ref = samplers.reference_points(exp.reward, exp.seed, args.n)
    out = args.out or os.path.join(exp.output_dir, "guided.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    _write_points(out, samplers.guided_samples(model, sched, exp.reward, point, args.n, x_ref=x_ref, workers=exp.workers))


def cmd_sweep(args):
    exp = _experiment(args)
    if not exp.sweep:
        raise ConfigError(f"{args.config}: sweep is empty")
    model, sched = _model(args, exp)
    rows, summary = experiments.run_sweep(model, sched, exp)
    csv_path, _ = experiments.write_sweep(rows, summary, _out_dir(args, exp))
    plot.plot_csv(csv_path)


def cmd_shift_study(args):
    exp = _experiment(args)
    if exp.shift_study is None:
        raise ConfigError(f"{args.config}: no shift_study section")
    model, sched = _model(args, exp)
    rows = experiments.run_shift_study(model, sched, exp)
    plot.plot_csv(experiments.write_shift_study(rows, _out_dir(args, exp)))


def cmd_plot(args):
    if not os.path.exists(args.csv):
        raise UsageError(f"{args.csv}: no such file")
    plot.plot_csv(args.csv, args.out)


def build_parser():
    parser = argparse.ArgumentParser(prog="codestream", description="Blockwise guided sampling of a toy diffusion model.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="log debug messages")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def command(name, func, help, config=True, model=True):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        if config:
            p.add_argument("--config", required=True, help="experiment config (YAML or JSON)")
            p.add_argument("--profile", choices=PROFILES, default="full", help="run profile (default: full)")
            p.add_argument("--seed", type=int, help="override the config seed")
        if model:
            source = p.add_mutually_exclusive_group()
            source.add_argument("--checkpoint", help=f"trained model (default: <output_dir>/{CHECKPOINT_NAME})")
            source.add_argument("--exact-prior", action="store_true", help="sample with the exact prior denoiser instead of a trained model")
            p.add_argument("--workers", type=int, help="worker threads for sampling")
        return p

    p = command("train", cmd_train, "train the ε-predictor on the prior", model=False)
    p.add_argument("--out", help="output directory (default: the config's output_dir)")

    p = command("sample", cmd_sample, "draw base samples to CSV")
    p.add_argument("-n", type=int, default=1000, help="number of samples")
    p.add_argument("--trajectory-every", type=int, metavar="K", help="write every K-th intermediate state instead")
    p.add_argument("--out", help="output CSV")

    p = command("guide", cmd_guide, "draw guided samples for one configuration to CSV")
    p.add_argument("--method", choices=samplers.METHODS, default="CoDe")
    p.add_argument("-N", type=int, default=1, help="streams per run")
    p.add_argument("-B", type=int, help=f"block size (CoDe default: {samplers.DEFAULT_BLOCK})")
    p.add_argument("--eta", type=float, default=1.0, help="noise ratio for CoDeEta")
    p.add_argument("--scale", type=float, default=0.0, help="guidance scale for GradGuide")
    p.add_argument("--x-ref", type=float, nargs=2, metavar=("X", "Y"), help="reference point for CoDeEta")
    p.add_argument("--frozen-gradient", action="store_true", help="GradGuide without differentiating through ε")
    p.add_argument("--temperature", type=float, default=0.0, help="selection temperature (0: argmax)")
    p.add_argument("-n", type=int, default=1000, help="number of samples")
    p.add_argument("--out", help="output CSV")

    p = command("sweep", cmd_sweep, "evaluate every sweep point (CSV, JSON and SVG)")
    p.add_argument("--out", help="output directory")

    p = command("shift-study", cmd_shift_study, "reward-shift robustness study (CSV and SVG)")
    p.add_argument("--out", help="output directory")

    p = command("plot", cmd_plot, "render a results CSV as SVG", config=False, model=False)
    p.add_argument("csv", help="sweep.csv or shift_study.csv")
    p.add_argument("--out", help="output directory (default: next to the CSV)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError, SchemaError, CheckpointError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except KeyboardInterrupt:
        log.error("Interrupted")
        return EXIT_FAILURE
    except Exception as exc:
        if args.verbose:
            log.exception("Run failed")
        else:
            log.error("Run failed: %s", exc)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
