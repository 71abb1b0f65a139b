"""Command-line entry point: ``cada {synth,train,eval,ablate,trend}``.

Every subcommand accepts ``--config`` (flat YAML of RunConfig fields),
``--seed`` and ``--out``.  Any RunConfig field can also be given as a flag
(``--epochs 3``, ``--enc-enabled false``); flags win over the config file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .config import RunConfig, coerce

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

# fields already exposed through the common options
_COMMON = {"seed", "out"}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_common(p: argparse.ArgumentParser, seed_help: str) -> None:
    p.add_argument("--config", help="flat YAML file of run settings")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help=seed_help)
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run settings (override the config file)")
    for f in fields(RunConfig):
        if f.name in _COMMON:
            continue
        g.add_argument(_flag(f.name), dest=f"cfg_{f.name}", default=argparse.SUPPRESS,
                       metavar=f.name.upper(), help=f"default: {f.default!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cada", description="Domain-adaptive optic disc/cup segmentation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic source/target dataset with a manifest")
    _add_common(p, "dataset seed (data_seed)")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train one configuration")
    _add_common(p, "run seed")
    p.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint in --out")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the target test split")
    _add_common(p, "dataset seed (data_seed) when the test split is generated")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    p.add_argument("--no-post", action="store_true", help="skip hole filling")
    _add_config_flags(p)

    p = sub.add_parser("ablate", help="run the ablation variants across seeds")
    _add_common(p, "base seed, used when --seeds is not given")
    p.add_argument("--variants", nargs="+", default=None, help="subset of variants (default: all seven)")
    p.add_argument("--seeds", nargs="+", type=int, default=None)
    _add_config_flags(p)

    p = sub.add_parser("trend", help="full adaptation vs. source-only across seeds and shift magnitudes")
    _add_common(p, "base seed, used when --seeds is not given")
    p.add_argument("--seeds", nargs="+", type=int, default=None)
    p.add_argument("--shifts", nargs="+", type=float, default=[1.0, 0.0])
    _add_config_flags(p)
    return parser


def resolve_config(args: argparse.Namespace, seed_field: str = "seed") -> RunConfig:
    """Config file first, then explicit flags."""
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    known = {f.name: f for f in fields(RunConfig)}
    changes = {}
    for key, value in vars(args).items():
        if key.startswith("cfg_"):
            name = key[4:]
            changes[name] = coerce(known[name], value)
    if "seed" in vars(args):
        changes[seed_field] = args.seed
    if "out" in vars(args):
        changes["out"] = args.out
    cfg = cfg.replace(**changes)
    cfg.validate()
    return cfg


def cmd_synth(args) -> int:
    from ..synthdata import make_domains, save_domains

    cfg = resolve_config(args, seed_field="data_seed")
    data = make_domains(cfg.input_size, cfg.n_source, cfg.n_target, cfg.n_test, shift=cfg.shift,
                        seed=cfg.data_seed)
    manifest = save_domains(data, cfg.out)
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train

    cfg = resolve_config(args)
    result = train(cfg, resume=not args.fresh)
    print(json.dumps({"run_dir": str(result.run_dir), "weights": result.weights_from,
                      **result.report.summary()}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    from ..metrics import evaluate
    from .train import load_data, load_eval_weights

    weights, meta = load_eval_weights(args.checkpoint)
    base = RunConfig.from_dict(meta["config"])
    # the run's own data settings are the default; file and flags may replace them
    if args.config:
        base = base.replace(**RunConfig.load(args.config).to_dict())
    known = {f.name: f for f in fields(RunConfig)}
    changes = {k[4:]: coerce(known[k[4:]], v) for k, v in vars(args).items() if k.startswith("cfg_")}
    if "seed" in vars(args):
        changes["data_seed"] = args.seed
    cfg = base.replace(**changes)
    out = Path(getattr(args, "out", None) or Path(args.checkpoint).resolve().parent / "eval")
    out.mkdir(parents=True, exist_ok=True)
    data = load_data(cfg)
    if not data.target_test:
        raise ValueError("the dataset has no target test split")
    report = evaluate(weights, data.target_test, post=not args.no_post)
    report.write_jsonl(out / "eval_report.jsonl")
    report.write_csv(out / "eval_report.csv")
    (out / "final_metrics.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True))
    print(json.dumps(report.summary(), sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablate import VARIANTS, ablate

    cfg = resolve_config(args)
    seeds = args.seeds or [cfg.seed]
    summary = ablate(cfg, variants=args.variants or list(VARIANTS), seeds=seeds, out=cfg.out,
                     figures=cfg.figures)
    for row in summary:
        print(f"{row['variant']:<12} " + "  ".join(
            f"{k} {row[k + '_mean']:.4f}+-{row[k + '_sd']:.4f}" for k in ("dice_cup", "dice_disc", "gamma_cdr")))
    return EXIT_OK


def cmd_trend(args) -> int:
    from .ablate import trend

    cfg = resolve_config(args)
    result = trend(cfg, seeds=args.seeds or [cfg.seed], shifts=args.shifts, out=cfg.out, figures=cfg.figures)
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "trend": cmd_trend}


def main(argv=None) -> int:
    from .train import TrainingDiverged

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except TrainingDiverged as exc:
        print(f"cada {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, OSError, KeyError) as exc:
        print(f"cada {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
