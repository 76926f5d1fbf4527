"""Command-line pipeline: stats, convert, run, eval, compare.

Exit codes: 0 on success, 1 for file/validation errors (diagnostic on
stderr), 2 for bad flags (argparse).  SNNFORGE_THREADS caps the worker
count used to fan out samples in `eval`.
"""

import argparse
import json
import os
import sys

from . import analysis, ann, convert, netio, snnsim
from .errors import SnnForgeError

_RESET_ALIASES = {"to_zero": "to_zero", "subtract": "by_subtraction",
                  "by_subtraction": "by_subtraction"}
_INPUT_ALIASES = {"analog": "analog_current", "analog_current": "analog_current",
                  "poisson": "poisson"}


def _workers():
    try:
        return max(1, int(os.environ.get("SNNFORGE_THREADS", "1")))
    except ValueError:
        return 1


def _add_sim_flags(p):
    p.add_argument("--steps", type=int, default=300, help="simulation steps")
    p.add_argument("--reset", choices=sorted(_RESET_ALIASES), default="subtract")
    p.add_argument("--input", choices=sorted(_INPUT_ALIASES), default="analog",
                   dest="input_mode")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--maxpool-gamma", type=float, default=0.999)


def _sim_config(args):
    return snnsim.SimConfig(
        tau=args.tau,
        dt=args.dt,
        n_steps=args.steps,
        reset_mode=_RESET_ALIASES[args.reset],
        input_mode=_INPUT_ALIASES[args.input_mode],
        rng_seed=args.seed,
        maxpool_gamma=args.maxpool_gamma,
    )


def _load_data(args):
    return netio.load_idx(args.images, args.labels)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="snnforge",
        description="Convert trained ReLU CNNs to spiking networks and simulate them.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="collect per-layer activation statistics")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--n", type=int, default=1000, help="normalization samples")
    p.add_argument("--reservoir", type=int, default=None,
                   help="cap stored values per layer (seeded uniform subsample)")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)

    p = sub.add_parser("convert", help="fold batchnorm and normalize parameters")
    p.add_argument("--model", required=True)
    p.add_argument("--stats", default=None, help="stats JSON from the stats command")
    p.add_argument("--percentile", type=float, default=99.9)
    p.add_argument("--no-normalization", action="store_true",
                   help="fold batchnorm only; keep raw parameter scales")
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None, help="write conversion report JSON")

    p = sub.add_parser("run", help="simulate one sample and dump its trace")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--index", type=int, default=0)
    _add_sim_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="accuracy-vs-steps curve over a sample subset")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--checkpoints", default=None,
                   help="comma-separated step counts (default 1,2,5,...,steps)")
    _add_sim_flags(p)
    p.add_argument("--csv", required=True)

    p = sub.add_parser("compare", help="correlate SNN rates with ANN activations "
                                       "and verify the exact rate identities")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--index", type=int, default=0)
    _add_sim_flags(p)
    p.add_argument("--out", required=True)
    return parser


def cmd_stats(args):
    net = netio.load_model(args.model)
    data = _load_data(args)
    stats = convert.collect_stats(
        net, data, args.n, reservoir=args.reservoir, seed=args.seed
    )
    with open(args.out, "w") as f:
        json.dump(stats.to_json(), f)
    print(f"wrote activation stats for {len(stats.values)} layers to {args.out}")
    return 0


def cmd_convert(args):
    net = netio.load_model(args.model)
    folded = convert.fold_batchnorm(net)
    if args.no_normalization:
        report = convert.ConversionReport(
            lambdas={}, percentile=None, normalized=False,
            fold_log=list(folded.meta.get("fold_log", [])),
        )
        out_net = folded
    else:
        if args.stats is None:
            raise SnnForgeError("convert: --stats is required unless --no-normalization")
        with open(args.stats) as f:
            stats = convert.ActivationStats.from_json(json.load(f))
        lambdas = convert.percentile_scale(stats, args.percentile)
        out_net, report = convert.normalize_params(
            folded, lambdas, percentile=args.percentile
        )
    netio.save_model(out_net, args.out)
    if args.report:
        with open(args.report, "w") as f:
            json.dump(report.to_json(), f)
    mode = "fold-only" if args.no_normalization else f"p={args.percentile}"
    print(f"wrote converted model ({mode}) to {args.out}")
    return 0


def cmd_run(args):
    net = netio.load_model(args.model)
    data = _load_data(args)
    config = _sim_config(args)
    x = data.images[args.index].reshape(net.input_shape)
    trace = snnsim.simulate(net, x, config, sample_index=args.index)
    trace.save_json(args.out)
    predicted = snnsim.classify(trace)
    print(f"sample {args.index}: predicted class {predicted}, "
          f"label {data.labels[args.index]}; trace written to {args.out}")
    return 0


def cmd_eval(args):
    net = netio.load_model(args.model)
    data = _load_data(args)
    config = _sim_config(args)
    if args.checkpoints:
        checkpoints = [int(c) for c in args.checkpoints.split(",")]
    else:
        checkpoints = [c for c in analysis.DEFAULT_CHECKPOINTS if c < args.steps]
        checkpoints.append(args.steps)
    curve = analysis.accuracy_curve(
        net, config, data, checkpoints=checkpoints, n_samples=args.n,
        workers=_workers(),
    )
    curve.to_csv(args.csv)
    print(f"accuracy at {curve.steps[-1]} steps: {curve.accuracies[-1]:.4f} "
          f"({curve.n_samples} samples); curve written to {args.csv}")
    return 0


def cmd_compare(args):
    net = netio.load_model(args.model)
    data = _load_data(args)
    config = _sim_config(args)
    x = data.images[args.index].reshape(net.input_shape)
    trace = snnsim.simulate(net, x, config, sample_index=args.index)
    record = ann.forward(net, x)
    theory = analysis.verify_rate_identity(trace, net, config)
    correlations = analysis.correlate(trace, record)
    out = {
        "sample_index": args.index,
        "correlations": {str(k): v for k, v in correlations.items()},
        "theory": theory.to_json(),
    }
    with open(args.out, "w") as f:
        json.dump(out, f)
    print(f"max rate-identity residual: {theory.max_residual:.3e}; "
          f"report written to {args.out}")
    return 0


_COMMANDS = {
    "stats": cmd_stats,
    "convert": cmd_convert,
    "run": cmd_run,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (SnnForgeError, OSError, ValueError) as exc:
        print(f"snnforge {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
