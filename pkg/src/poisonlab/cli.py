"""Command-line interface: staged pipeline subcommands plus run-all and report."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import load_config
from .data import IdxFormatError
from .harness import (
    StageError,
    run_eval_attack,
    run_eval_cleanse,
    run_eval_strip,
    run_experiment,
    run_gen_data,
    run_poison,
    run_train_clean,
    run_train_victim,
)
from .report import render_report

_STAGES = {
    "gen-data": (run_gen_data, "generate (or ingest) the train/test datasets"),
    "train-clean": (run_train_clean, "train the clean reference model"),
    "poison": (run_poison, "build the poisoning plan and poison the training set"),
    "train-victim": (run_train_victim, "train the victim model on the poisoned set"),
    "eval-attack": (run_eval_attack, "accuracy, attack success rate, and activation sweep"),
    "eval-strip": (run_eval_strip, "entropy-screen evaluation of the victim"),
    "eval-cleanse": (run_eval_cleanse, "reverse-trigger scan and anomaly index"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poisonlab",
        description="Label-smoothing backdoor laboratory: poison, train, attack, defend.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, metavar="PATH",
                        help="experiment config file (flat key = value lines)")
    common.add_argument("--seed", type=int, default=None, metavar="U64",
                        help="master seed, overrides run.master_seed")
    common.add_argument("--out", type=Path, default=Path("out"), metavar="DIR",
                        help="run directory for artifacts (default: out)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in _STAGES.items():
        sub.add_parser(name, parents=[common], help=help_text)
    sub.add_parser("run-all", parents=[common],
                   help="full pipeline in one shot: data through both defenses")
    sub.add_parser("report", parents=[common],
                   help="render figures and a text summary from a run directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            written = render_report(args.out)
            for path in written:
                print(f"wrote {path}")
            return 0
        config = load_config(args.config, args.seed)
        if args.command == "run-all":
            metrics = run_experiment(config, args.out)
            print(f"wrote {args.out / 'metrics.json'}")
            print(f"mode={metrics['mode']} template={metrics['template']} "
                  f"target={metrics['target_class']}")
            print(f"victim clean accuracy {metrics['clean_accuracy']:.4f} "
                  f"(baseline {metrics['baseline_accuracy']:.4f})")
            print(f"asr with all triggers active {metrics['asr_full']:.4f}")
            print(f"strip far {metrics['strip']['far']:.4f} "
                  f"at realized frr {metrics['strip']['frr_realized']:.4f}")
            index = metrics["cleanse"]["anomaly_index"]
            shown = f"{index:.4f}" if index is not None else "undefined"
            print(f"cleanse anomaly index {shown}")
            return 0
        stage_fn = _STAGES[args.command][0]
        stage_fn(config, args.out)
        print(f"{args.command} complete, artifacts under {args.out}")
        return 0
    except (StageError, IdxFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
