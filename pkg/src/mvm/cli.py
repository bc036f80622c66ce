"""Command-line entry point: ``mvm <subcommand> [options]``.

Exit codes: 0 success, 1 usage or invalid argument, 2 numerical failure,
3 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from . import synthdata as sd
from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .config import DataConfig, ModelConfig, dump_config, load_config
from .errors import FormatError, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("mvm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key-value config file ([model] and [data] sections)")
    p.add_argument("--seed", type=int, help="random seed (overrides the config file)")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory (default: current)")
    p.add_argument("--precision", choices=("f32", "f64"), help="floating-point precision")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvm", description="Multi-head visual-audio memory on synthetic homophene data.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate train/test datasets")
    _common(p)

    p = sub.add_parser("train", help="train a model on a dataset")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset file, or a directory holding train.mvmd")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, help="learning rate (overrides the config file)")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="dataset file, or a directory holding test.mvmd")
    p.add_argument("--baseline", type=Path, help="checkpoint to compute per-word deltas against")

    p = sub.add_parser("ablate", help="train and compare the four ablation variants")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="directory holding train.mvmd and test.mvmd")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds, starting at --seed")
    p.add_argument("--lr", type=float)

    p = sub.add_parser("inspect-memory", help="dump addressing scores as CSV")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="dataset file, or a directory holding test.mvmd")
    p.add_argument("--examples", type=int, nargs="*", help="record indices (default: first of each homophene word)")

    p = sub.add_parser("grad-check", help="finite-difference check of the micro model")
    _common(p)
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _configs(args) -> tuple[ModelConfig, DataConfig]:
    overrides = {"seed": args.seed, "precision": args.precision}
    if getattr(args, "lr", None) is not None:
        overrides["lr"] = args.lr
    return load_config(args.config, **overrides)


def _dataset_path(path: Path, default_name: str) -> Path:
    return path / default_name if path.is_dir() else path


def _model_config_for(lexicon: sd.Lexicon, frames: int, model: ModelConfig) -> ModelConfig:
    return model.replace(n_visemes=lexicon.n_visemes, n_phonemes=lexicon.n_phonemes,
                         n_words=lexicon.n_words, frames=frames or model.frames)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    model_cfg, data_cfg = _configs(args)
    lexicon, train, test = sd.generate(data_cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    sd.write_dataset(args.out / "train.mvmd", lexicon, train)
    sd.write_dataset(args.out / "test.mvmd", lexicon, test)
    (args.out / "config.ini").write_text(dump_config(model_cfg, data_cfg), encoding="utf-8")
    print(f"wrote {len(train)} training and {len(test)} test records to {args.out}")
    print(f"homophene pairs: {lexicon.homophene_pairs}")
    return EXIT_OK


def cmd_train(args) -> int:
    model_cfg, _ = _configs(args)
    lexicon, data = sd.read_dataset(_dataset_path(args.data, "train.mvmd"))
    resume = load_checkpoint(args.resume) if args.resume else None
    cfg = resume.config if resume is not None else _model_config_for(lexicon, data.frames, model_cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    log_path = args.out / "train_log.ndjson"
    try:
        with open(log_path, "a" if resume else "w", encoding="utf-8") as stream:
            result = harness.train(cfg, lexicon, data, args.steps, resume=resume, log_stream=stream)
    except harness.TrainingDiverged as exc:
        save_checkpoint(args.out / "last_good.mvmc", exc.checkpoint)
        raise
    save_checkpoint(args.out / "checkpoint.mvmc", result.checkpoint)
    last = result.log[-1] if result.log else {}
    print(f"trained {args.steps} steps ({result.checkpoint.step} total); last record {json.dumps(last)}")
    print(f"checkpoint: {args.out / 'checkpoint.mvmc'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    lexicon, data = sd.read_dataset(_dataset_path(args.data, "test.mvmd"))
    baseline = load_checkpoint(args.baseline) if args.baseline else None
    report = harness.evaluate(ckpt, lexicon, data, baseline, baseline_name=str(args.baseline) if baseline else None)
    args.out.mkdir(parents=True, exist_ok=True)
    _write_json(args.out / "eval_report.json", report.to_dict())
    print(harness.format_report(report))
    return EXIT_OK


def cmd_ablate(args) -> int:
    model_cfg, _ = _configs(args)
    lexicon, train = sd.read_dataset(args.data / "train.mvmd")
    _, test = sd.read_dataset(args.data / "test.mvmd")
    base = _model_config_for(lexicon, train.frames, model_cfg)
    seeds = range(base.seed, base.seed + args.seeds)
    args.out.mkdir(parents=True, exist_ok=True)

    def on_run(name, seed, ckpt, report):
        save_checkpoint(args.out / f"{name}-seed{seed}.mvmc", ckpt)
        print(f"{name:15s} seed {seed}: accuracy {100 * report.accuracy:.2f}%", flush=True)

    result = harness.ablate(base, lexicon, train, test, args.steps, seeds, on_run=on_run)
    _write_json(args.out / "ablation.json", {
        "steps": args.steps, "seeds": list(seeds), "summary": result.summary(),
        "runs": {name: [r.to_dict() for r in reps] for name, reps in result.reports.items()},
    })
    print(result.format())
    return EXIT_OK


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    lexicon, data = sd.read_dataset(_dataset_path(args.data, "test.mvmd"))
    if args.examples:
        if min(args.examples) < 0 or max(args.examples) >= len(data):
            raise ValueError(f"example indices must lie in [0, {len(data)})")
        index = np.array(args.examples)
    else:
        words = sorted(lexicon.homophene_words())
        index = np.array([np.flatnonzero(data.labels == w)[0] for w in words if np.any(data.labels == w)], dtype=int)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "addressing.csv"
    rows = harness.inspect_memory(restore_model(ckpt), data.subset(index), path)
    _write_json(args.out / "addressing_examples.json",
                {"examples": [int(i) for i in index], "labels": [int(data.labels[i]) for i in index]})
    print(f"wrote {rows} rows for {len(index)} examples to {path}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    overrides = {} if args.seed is None else {"seed": args.seed}
    report = harness.grad_check(harness.micro_config(**overrides))
    print(report.format())
    return EXIT_OK if report.passed else EXIT_NUMERICAL


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "inspect-memory": cmd_inspect,
    "grad-check": cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"mvm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"mvm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, OSError) as exc:
        print(f"mvm: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"mvm: invalid argument: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
