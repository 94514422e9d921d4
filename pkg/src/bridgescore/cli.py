"""Command-line entry point: ``bridgescore <subcommand> [options]``.

Exit status is 0 on success, 1 for usage, configuration or missing-file
errors and 2 for numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .conditioning import ControlField, controlled_batch
from .experiments import evaluate
from .network import CheckpointError, load_checkpoint, save_checkpoint
from .oracles import (OracleError, bel_second_moment_formula, brownian_bridge_score,
                      double_well_committor, mc_second_moment, ou_tweedie_score)
from .sde import SimulationError, TimeGrid, derive_seed, write_paths_csv
from .targets import AlphaSchedule, TargetError
from .training import TrainingError, train

log = logging.getLogger("bridgescore")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
CONFIG_NAME = "config.txt"
CHECKPOINT_NAME = "checkpoint.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="run configuration file")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory or file")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="BLAS thread limit")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="bridgescore", parents=[common],
                     description="Learn and sample conditioned diffusions.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    sub.add_parser("train", parents=[common], help="train a control network")

    p = sub.add_parser("sample", parents=[common], help="sample controlled paths from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--y", required=True, help="comma-separated conditioning value")
    p.add_argument("--n-paths", type=int, default=1000)
    p.add_argument("--x0", default=None, help="comma-separated initial state (default eval.y_init)")

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a trained run directory")
    p.add_argument("--run", required=True, help="run directory written by train")
    p.add_argument("--experiment", default=None)

    p = sub.add_parser("oracle", parents=[common], help="write an oracle table")
    p.add_argument("kind", choices=["committor", "bridge-score", "tweedie"])
    p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("variance-check", parents=[common],
                       help="second-moment formula against Monte Carlo")
    p.add_argument("--schedule", default="average")
    p.add_argument("--width", type=float, default=None)
    p.add_argument("--d", type=float, default=0.0)
    p.add_argument("--n-samples", type=int, default=100000)
    p.add_argument("--n-steps", type=int, default=500)
    return parser


def _floats(text):
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


def _resolve_config(args, required=True):
    path = getattr(args, "config", None)
    if path is None:
        if required:
            raise UsageError("--config is required")
        return None
    doc = cfgmod.load_config(path)
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    return cfgmod.to_experiment_config(doc)


def _require_out(args):
    out = getattr(args, "out", None)
    if out is None:
        raise UsageError("--out is required")
    return Path(out)


def cmd_train(args) -> Path:
    exp = _resolve_config(args)
    run = _require_out(args)
    run.mkdir(parents=True, exist_ok=True)
    (run / CONFIG_NAME).write_text(cfgmod.serialise_config(cfgmod.from_experiment_config(exp)))
    net, history = train(replace(exp.train, seed=exp.seed))
    save_checkpoint(net, run / CHECKPOINT_NAME, steps=len(history))
    with open(run / "loss_history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["batch", "loss"])
        for b, loss in enumerate(history):
            w.writerow([b, format(loss, ".17g")])
    print(run)
    return run


def _run_config(args, run_dir):
    if getattr(args, "config", None) is not None:
        return _resolve_config(args)
    snap = Path(run_dir) / CONFIG_NAME
    if not snap.exists():
        raise FileNotFoundError(f"no {CONFIG_NAME} in {run_dir}; pass --config")
    doc = cfgmod.load_config(snap)
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    return cfgmod.to_experiment_config(doc)


def cmd_sample(args) -> Path:
    ckpt = Path(args.checkpoint)
    net, _, _ = load_checkpoint(ckpt)
    exp = _run_config(args, ckpt.parent)
    model = exp.train.build_model()
    y = _floats(args.y)
    if y.size != net.obs_dim:
        raise UsageError(f"y has {y.size} entries, the network expects {net.obs_dim}")
    if net.state_dim != model.dim:
        raise UsageError("checkpoint does not match the configured model")
    x0 = _floats(args.x0) if args.x0 else np.asarray(exp.y_init)
    if args.n_paths < 1:
        raise UsageError("--n-paths must be positive")
    grid = TimeGrid(0.0, exp.train.t_end, exp.eval_steps)
    seed = exp.seed if getattr(args, "seed", None) is None else args.seed
    batch = controlled_batch(model, ControlField(net), y[None], grid, x0, args.n_paths,
                             derive_seed(seed, "sample"))
    out = Path(getattr(args, "out", None) or ckpt.parent / "samples.csv")
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "samples.csv"
    write_paths_csv(batch, out, y=batch.observations)
    print(out)
    return out


def cmd_evaluate(args) -> Path:
    run = Path(args.run)
    ckpt = run / CHECKPOINT_NAME
    if not ckpt.exists():
        raise FileNotFoundError(f"missing checkpoint {ckpt}")
    net, _, _ = load_checkpoint(ckpt)
    exp = _run_config(args, run)
    if args.experiment is not None and args.experiment != exp.experiment:
        exp = replace(cfgmod.to_experiment_config({"experiment": args.experiment, "seed": exp.seed}),
                      train=exp.train)
    out = Path(getattr(args, "out", None) or run / "evaluation")
    report = evaluate(replace(exp, control="trained"), net, out)
    print(out / "report.json")
    return out / "report.json"


_ORACLE_DEFAULTS = {
    "committor": {"v": 5.0, "x_min": -2.5, "x_max": 2.5, "n_x": 801, "n_t": 2000, "r": 0.1, "target": -1.0},
    "bridge-score": {"T": 1.0, "n_t": 10, "n_x": 21, "x_min": -2.0, "x_max": 2.0, "y": -1.0},
    "tweedie": {"t": 1.0, "n_x": 21, "x_min": -2.0, "x_max": 2.0, "x0": 0.0},
}


def _oracle_params(kind, items):
    params = dict(_ORACLE_DEFAULTS[kind])
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or key not in params:
            raise UsageError(f"unknown oracle parameter {key!r} for {kind}; "
                             f"known: {', '.join(sorted(params))}")
        try:
            params[key] = type(params[key])(float(value)) if isinstance(params[key], int) else float(value)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {value!r}") from exc
    return params


def cmd_oracle(args) -> Path:
    params = _oracle_params(args.kind, args.param)
    out = _require_out(args)
    if out.suffix == "":
        out.mkdir(parents=True, exist_ok=True)
        out = out / {"committor": "committor.txt", "bridge-score": "bridge_score.csv",
                     "tweedie": "tweedie.csv"}[args.kind]
    if args.kind == "committor":
        table = double_well_committor(v=params["v"], x_min=params["x_min"], x_max=params["x_max"],
                                      n_x=params["n_x"], n_t=params["n_t"], r=params["r"],
                                      target=params["target"])
        table.save(out)
    elif args.kind == "bridge-score":
        ts = np.linspace(0.0, 0.9 * params["T"], params["n_t"])
        xs = np.linspace(params["x_min"], params["x_max"], params["n_x"])
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "y", "score"])
            for t in ts:
                for x in xs:
                    s = brownian_bridge_score(t, x, params["y"], params["T"])
                    w.writerow([format(v, ".17g") for v in (t, x, params["y"], float(s))])
    else:
        xs = np.linspace(params["x_min"], params["x_max"], params["n_x"])
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "x0", "score"])
            for x in xs:
                s = ou_tweedie_score(params["t"], x, params["x0"])
                w.writerow([format(v, ".17g") for v in (params["t"], x, params["x0"], float(s))])
    print(out)
    return out


def cmd_variance_check(args) -> str:
    try:
        sched = AlphaSchedule(args.schedule, width=args.width)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.n_samples < 2:
        raise UsageError("--n-samples must be at least 2")
    seed = getattr(args, "seed", 0)
    grid = TimeGrid(0.0, 1.0, args.n_steps)
    formula = bel_second_moment_formula(sched, args.d, grid)
    est, se = mc_second_moment(sched, args.d, args.n_samples, seed, n_steps=args.n_steps)
    lines = [
        f"schedule {sched.resolved(grid).describe()}  d {args.d!r}  samples {args.n_samples}  steps {args.n_steps}",
        "formula\tmonte_carlo\tstderr",
        f"{formula.value:.10g}\t{est:.10g}\t{se:.3g}",
    ]
    if not formula.boundary_ok:
        lines.append("warning: schedule violates the terminal boundary condition")
    text = "\n".join(lines) + "\n"
    out = getattr(args, "out", None)
    if out is not None:
        Path(out).write_text(text)
    sys.stdout.write(text)
    return text


_COMMANDS = {"train": cmd_train, "sample": cmd_sample, "evaluate": cmd_evaluate,
             "oracle": cmd_oracle, "variance-check": cmd_variance_check}


def _limits(threads):
    if threads is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=threads)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        with _limits(getattr(args, "threads", None)):
            _COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"bridgescore: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (cfgmod.ConfigError, CheckpointError, FileNotFoundError, OSError) as exc:
        print(f"bridgescore: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SimulationError, TargetError, TrainingError, OracleError, ArithmeticError,
            FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"bridgescore: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"bridgescore: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
