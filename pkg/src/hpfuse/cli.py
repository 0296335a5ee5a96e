"""Command-line interface.

Subcommands: ``ask`` (print/cache the four answers per source image),
``train``, ``fuse``, ``eval`` (directory metrics report), ``synth``
(deterministic synthetic dataset). Exit codes: 64 for usage errors, 65 for
config file errors, 2 for a missing model file, 1 for other failures.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, TrainConfig, apply_overrides, parse_config_file
from .data import DatasetError, make_synthetic_dataset
from .metrics import evaluate_directory, format_table, write_csv
from .pipeline import TrainingAborted, ask, fuse, train
from .backends import StubAnswerBackend, HttpAnswerBackend, ProtocolError, TransportError
from .qa_cache import AnswerCache

EXIT_USAGE = 64
EXIT_CONFIG = 65
EXIT_MISSING_MODEL = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="hpfuse", description="Question-guided infrared/visible image fusion.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_ask = sub.add_parser("ask", help="answer the four questions for an image pair")
    p_ask.add_argument("--ir", required=True)
    p_ask.add_argument("--vis", required=True)
    p_ask.add_argument("--backend", choices=("stub", "http"), default="stub")
    p_ask.add_argument("--seed", type=int, default=0)
    p_ask.add_argument("--model-name", default="default", help="model name for the http backend")
    p_ask.add_argument("--cache", default=None, help="answer cache file (JSON lines)")
    p_ask.add_argument("--json", action="store_true")
    p_ask.set_defaults(func=cmd_ask)

    p_train = sub.add_parser("train", help="train a fusion model")
    p_train.add_argument("--config", default=None, help="key = value config file")
    p_train.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                         help="override a config key (repeatable)")
    p_train.add_argument("--backend", choices=("stub", "http"), default=None)
    p_train.add_argument("--resume", type=int, default=None, metavar="EPOCH",
                         help="resume from the epoch-EPOCH checkpoint in out_dir")
    p_train.add_argument("--json", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_fuse = sub.add_parser("fuse", help="fuse one image pair with a trained model")
    p_fuse.add_argument("--ir", required=True)
    p_fuse.add_argument("--vis", required=True)
    p_fuse.add_argument("--model", required=True)
    p_fuse.add_argument("--out", required=True)
    p_fuse.add_argument("--backend", choices=("stub", "http"), default="stub")
    p_fuse.add_argument("--seed", type=int, default=0)
    p_fuse.add_argument("--cache", default=None)
    p_fuse.add_argument("--no-guidance", action="store_true")
    p_fuse.set_defaults(func=cmd_fuse)

    p_eval = sub.add_parser("eval", help="score fused images against their sources")
    p_eval.add_argument("--fused-dir", required=True)
    p_eval.add_argument("--ir-dir", required=True)
    p_eval.add_argument("--vis-dir", required=True)
    p_eval.add_argument("--report", required=True, help="CSV output path")
    p_eval.set_defaults(func=cmd_eval)

    p_synth = sub.add_parser("synth", help="write a deterministic synthetic dataset")
    p_synth.add_argument("--n", type=int, required=True)
    p_synth.add_argument("--size", type=int, required=True)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True)
    p_synth.set_defaults(func=cmd_synth)

    return parser


def cmd_ask(args) -> int:
    backend = (StubAnswerBackend(seed=args.seed) if args.backend == "stub"
               else HttpAnswerBackend(model=args.model_name))
    cache = AnswerCache.load(args.cache) if args.cache else None
    rows = ask(args.ir, args.vis, answer_backend=backend, cache=cache)
    for source, qid, question, answer in rows:
        if args.json:
            print(json.dumps({"source": source, "qid": qid, "question": question, "answer": answer},
                             sort_keys=True))
        else:
            print(f"{source}\tQ{qid}\t{question}\t{answer}")
    return 0


def cmd_train(args) -> int:
    config = parse_config_file(args.config) if args.config else TrainConfig()
    apply_overrides(config, args.set)
    if args.backend:
        config.backend = args.backend
    result = train(config, log_stream=sys.stdout, json_logs=args.json, resume_epoch=args.resume)
    print(f"model written to {result.model_path}")
    return 0


def cmd_fuse(args) -> int:
    out = fuse(args.ir, args.vis, args.model, args.out, backend=args.backend,
               seed=args.seed, cache_path=args.cache, use_guidance=not args.no_guidance)
    print(f"fused image written to {out}")
    return 0


def cmd_eval(args) -> int:
    report = evaluate_directory(args.fused_dir, args.ir_dir, args.vis_dir)
    write_csv(report, args.report)
    print(format_table(report))
    print(f"report written to {args.report}")
    return 0


def cmd_synth(args) -> int:
    written = make_synthetic_dataset(args.out, n=args.n, size=args.size, seed=args.seed)
    print(f"wrote {len(written)} images under {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_MISSING_MODEL
    except (DatasetError, TrainingAborted, TransportError, ProtocolError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
