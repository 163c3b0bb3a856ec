"""Command-line entry point: ``ceit {analyze,train,eval,gradcheck,export,synth}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(missing files, shape mismatches, a failed gradient check, divergence).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as config_mod
from .config import ConfigError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
GRADCHECK_PARAM_WARNING = 50_000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _model_flags(p: argparse.ArgumentParser, default_preset: str | None) -> None:
    p.add_argument("--preset", default=default_preset, choices=sorted(config_mod.PRESETS), help="built-in model preset")
    p.add_argument("--config", action="append", default=[], metavar="PATH", help="JSON config file; repeatable, later files win")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides", help="dotted override, e.g. model.depth=2")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ceit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("analyze", help="parameter / FLOP report of a model config")
    _model_flags(p, "ceit-t")
    p.add_argument("--resolution", type=int, default=None, help="input side in pixels (default: config image_size)")
    p.add_argument("--elementwise", action="store_true", help="also count norms, activations, softmax and pooling")
    p.add_argument("--out", metavar="PATH", help="write the JSON report here")

    p = sub.add_parser("train", help="train on a dataset container file")
    _model_flags(p, "ceit-toy")
    p.add_argument("--dataset", required=True, metavar="PATH")
    p.add_argument("--seed", type=int, default=None, help="single source of randomness (overrides train.seed)")
    p.add_argument("--steps", type=int, default=None, help="stop after this many optimizer steps")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    p.add_argument("--out", required=True, metavar="DIR", help="directory for checkpoint.ckpt, metrics.csv, config.json")

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--dataset", required=True, metavar="PATH")
    p.add_argument("--batch-size", type=int, default=32)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _model_flags(p, "ceit-toy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scope", choices=("model", "lca"), default="model")
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--corrupt", metavar="PARAM", help="test hook: perturb this parameter's analytic gradient")
    p.add_argument("--out", metavar="PATH", help="write per-parameter errors as JSON")

    p = sub.add_parser("export", help="write the effective config (after presets, files and overrides)")
    _model_flags(p, "ceit-toy")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", metavar="PATH", help="output file (default: stdout)")

    p = sub.add_parser("synth", help="generate a synthetic dataset container")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, metavar="PATH")
    return parser


def _configs(args):
    model, train = config_mod.resolve(args.preset, args.config, args.overrides)
    if getattr(args, "seed", None) is not None:
        train.seed = args.seed
    return model, train


def _cmd_analyze(args) -> int:
    from .complexity import analyze

    model, _ = _configs(args)
    report = analyze(model, args.resolution, elementwise=args.elementwise)
    print(report.format_table())
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .training import load_checkpoint, load_dataset, save_checkpoint, train, write_metrics_csv

    model_cfg, train_cfg = _configs(args)
    dataset = load_dataset(args.dataset)
    resume = load_checkpoint(args.resume, expect=model_cfg) if args.resume else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def log(row):
        if row["step"] % 10 == 0:
            print(f"step {row['step']:5d}  lr {row['lr']:.3e}  loss {row['loss']:.4f}  acc {row['accuracy']:.3f}")

    result = train(model_cfg, train_cfg, dataset, max_steps=args.steps, resume=resume, on_step=log)
    save_checkpoint(result.checkpoint, out / "checkpoint.ckpt")
    write_metrics_csv(result.history, out / "metrics.csv")
    (out / "config.json").write_text(config_mod.dump_config(model_cfg, train_cfg))
    last = result.history[-1] if result.history else None
    if last:
        print(f"done: {len(result.history)} steps, final loss {last['loss']:.4f}")
    print(f"wrote {out / 'checkpoint.ckpt'} and {out / 'metrics.csv'}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .training import evaluate, load_checkpoint, load_dataset

    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    acc = evaluate(ckpt.build_model(), dataset, args.batch_size)
    print(f"top-1 accuracy: {acc * 100:.2f}% ({len(dataset)} samples)")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .complexity import count_params
    from .gradcheck import model_gradcheck

    model, _ = _configs(args)
    n = count_params(model).params
    if n > GRADCHECK_PARAM_WARNING:
        print(f"warning: {n:,} parameters; the check needs two forward passes per scalar", file=sys.stderr)
    result = model_gradcheck(model, seed=args.seed, scope=args.scope, threshold=args.threshold, corrupt=args.corrupt)
    print(result.format_table())
    if args.out:
        payload = {"threshold": result.threshold, "passed": result.passed, "errors": result.errors}
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    if not result.passed:
        print("gradient check FAILED for: " + ", ".join(result.failures), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_export(args) -> int:
    model, train = _configs(args)
    text = config_mod.dump_config(model, train)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_synth(args) -> int:
    from .training import save_dataset, synth_dataset

    ds = synth_dataset(args.classes, args.samples, args.image_size, seed=args.seed, noise=args.noise)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples of {args.classes} classes to {args.out}")
    return EXIT_OK


COMMANDS = {
    "analyze": _cmd_analyze,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "export": _cmd_export,
    "synth": _cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, FloatingPointError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
