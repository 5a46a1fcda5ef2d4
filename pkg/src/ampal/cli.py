"""Command-line entry point: ``ampal <subcommand> [options]``.

Heavy imports happen after argument parsing so ``--single-thread`` can pin
the numerical libraries to one thread before they load.
"""

import argparse
import json
import os
import sys

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
               "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS")

DEFAULT_OUT = "ampal-out"


def _parse_set(text):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key, parsed


def _config_parent():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("experiment configuration")
    g.add_argument("--config", help="JSON config file (may name a preset)")
    g.add_argument("--preset", help="start from a named preset: default, compact, tiny")
    g.add_argument("--set", dest="overrides", action="append", type=_parse_set, default=[],
                   metavar="KEY=VALUE", help="override any field, e.g. train.lr=0.01 (repeatable)")
    g.add_argument("--seed", type=int)
    g.add_argument("--budget", type=int)
    g.add_argument("--ensemble-size", type=int)
    g.add_argument("--initial-points", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--n-val-settings", type=int)
    g.add_argument("--dry-wav", help="mono WAV used as the fixed dry input")
    g.add_argument("--val-wav", action="append", default=[], help="validation WAV (repeatable)")
    g.add_argument("--out", help=f"output directory (default {DEFAULT_OUT})")
    g.add_argument("--workers", type=int, help="processes for ensemble training")
    g.add_argument("--single-thread", action="store_true",
                   help="one process, one BLAS thread: bit-reproducible runs")
    g.add_argument("--verbose", action="store_true", help="print per-epoch training losses")
    return p


def build_parser():
    parser = argparse.ArgumentParser(prog="ampal", description="Parametric amp modeling with active learning")
    sub = parser.add_subparsers(dest="command", required=True)
    cfg = _config_parent()

    sub.add_parser("run-al", parents=[cfg], help="run the active-learning loop")
    b = sub.add_parser("baseline", parents=[cfg], help="uniform or Beta sampling baseline")
    b.add_argument("--strategy", choices=("uniform", "beta"), required=True)
    b.add_argument("--n", type=int, help="number of labels (must equal the budget; default budget)")

    t = sub.add_parser("train", parents=[cfg], help="train one model on a saved dataset")
    t.add_argument("--dataset", required=True, help="dataset directory")
    t.add_argument("--checkpoint", required=True, help="where to write the trained model")
    t.add_argument("--init-seed", type=int, default=0)

    e = sub.add_parser("eval", parents=[cfg], help="validation MSE of a checkpoint")
    e.add_argument("--checkpoint", required=True)

    for name, helptext in (("fit-beta", "maximum-likelihood Beta fit of knob components"),
                           ("hist", "histogram of knob components")):
        h = sub.add_parser(name, help=helptext)
        h.add_argument("source", nargs="+",
                       help="dataset directory, run log (.jsonl) or text file of numbers")
        if name == "hist":
            h.add_argument("--bins", type=int, default=10)

    r = sub.add_parser("report", help="comparison table, histogram and Beta fit from run logs")
    r.add_argument("logs", nargs="+", help="run log files or directories containing them")
    r.add_argument("--bins", type=int, default=10)
    return parser


def _experiment_config(args):
    from .experiments import load_config, preset

    if args.config:
        config = load_config(args.config)
        if args.preset:
            raise ValueError("--preset and --config are mutually exclusive (name the preset in the file)")
    else:
        config = preset(args.preset or "default")
    over = dict(args.overrides)
    flag_map = {
        "seed": "seed", "budget": "budget", "ensemble_size": "ensemble_size",
        "initial_points": "initial_points", "epochs": "train.epochs", "lr": "train.lr",
        "n_val_settings": "n_val_settings", "dry_wav": "dry_path", "workers": "workers",
        "out": "output_dir",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr)
        if value is not None:
            over[key] = value
    if args.val_wav:
        over["val_paths"] = list(args.val_wav)
    if args.verbose:
        over["train.verbose"] = True
    if args.single_thread:
        over["workers"] = 1
    if over:
        config = config.with_overrides(over)
    if config.output_dir is None:
        config = config.with_overrides({"output_dir": DEFAULT_OUT})
    return config.validate()


def _knob_components(sources):
    import numpy as np

    from .persistence import RunLog, load_dataset

    parts = []
    for src in sources:
        if os.path.isdir(src):
            ds = load_dataset(src)
            parts.append(ds.knobs().ravel())
        elif src.endswith(".jsonl"):
            log = RunLog.read(src)
            gs = [np.asarray(d["g"], dtype=float).ravel() for d in log.events("dataset")]
            if not gs:
                raise ValueError(f"{src}: run log has no dataset record")
            parts.extend(gs)
        else:
            with open(src) as fh:
                parts.append(np.array([float(v) for v in fh.read().split()]))
    return np.concatenate(parts) if parts else np.zeros(0)


def _find_logs(paths):
    found = []
    for p in paths:
        if os.path.isdir(p):
            for root, _, files in sorted(os.walk(p)):
                found += [os.path.join(root, f) for f in sorted(files) if f.endswith(".jsonl")]
        else:
            found.append(p)
    if not found:
        raise ValueError("no run logs found")
    return found


def _run(args):
    if args.command == "run-al":
        from .experiments import run_active_learning

        config = _experiment_config(args)
        _, _, _, log = run_active_learning(config, progress=print)
        print(f"run log: {log.path}")
    elif args.command == "baseline":
        from .experiments import run_baseline

        config = _experiment_config(args)
        n = args.n if args.n is not None else config.budget
        _, _, log = run_baseline(args.strategy, n, config, progress=print)
        print(f"run log: {log.path}")
    elif args.command == "train":
        from dataclasses import replace

        from .model import init_model
        from .persistence import load_dataset, save_checkpoint
        from .training import train_model

        config = _experiment_config(args)
        ds = load_dataset(args.dataset)
        params, hist = train_model(init_model(config.model, args.init_seed), ds,
                                   replace(config.train, verbose=True))
        save_checkpoint(args.checkpoint, params, {"dataset": os.path.abspath(args.dataset),
                                                  "final_loss": hist[-1]})
        print(f"checkpoint: {args.checkpoint}")
    elif args.command == "eval":
        from .experiments import evaluate, validation_signals
        from .persistence import load_checkpoint

        config = _experiment_config(args)
        params, _ = load_checkpoint(args.checkpoint)
        err = evaluate(params, validation_signals(config), config.n_val_settings,
                       config.oracle, config.val_settings_seed)
        print(f"validation mse {err:.6e}")
    elif args.command == "fit-beta":
        from .baselines import fit_beta

        bp = fit_beta(_knob_components(args.source))
        print(f"alpha {bp.alpha:.6f} beta {bp.beta:.6f}")
    elif args.command == "hist":
        import numpy as np

        from .baselines import component_histogram

        counts = component_histogram([_knob_components(args.source)], args.bins)
        edges = np.linspace(0.0, 1.0, args.bins + 1)
        for a, b, c in zip(edges[:-1], edges[1:], counts):
            print(f"{a:.3f} {b:.3f} {c}")
    elif args.command == "report":
        from .experiments import report
        from .persistence import RunLog

        logs = [RunLog.read(p) for p in _find_logs(args.logs)]
        print(report(logs, bins=args.bins).format())


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "single_thread", False):
        for var in THREAD_VARS:
            os.environ[var] = "1"
    try:
        _run(args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"ampal: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
