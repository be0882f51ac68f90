"""Command-line entry point: ``archsleuth {gen,train,extract,eval,e2e}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .generator import GenerationError
from .identifier.lstm import CheckpointError
from .identifier.train import TrainingDivergence
from .tracesim import TraceParseError

EXIT_OK, EXIT_USAGE, EXIT_TRAIN, EXIT_PARSE, EXIT_MISMATCH = 0, 2, 3, 4, 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors share the exit-code contract
        self.print_usage(sys.stderr)
        raise pipeline.UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="archsleuth", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON config; missing keys take the shipped defaults")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config value, e.g. train.epochs=20")

    g = sub.add_parser("gen", help="generate graphs, labels and features")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--split", type=float)
    g.add_argument("--traces", action="store_true", help="also write full trace files")

    t = sub.add_parser("train", help="train the sequence identifier")
    common(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)

    x = sub.add_parser("extract", help="recover an architecture from one trace file")
    common(x)
    x.add_argument("--trace", required=True)
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--noise", type=float, default=0.0,
                   help="expected noise fraction; widens volume tolerances")

    e = sub.add_parser("eval", help="metrics for a dataset and checkpoint")
    common(e)
    e.add_argument("--dataset", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)

    a = sub.add_parser("e2e", help="gen, train, extract and eval in one directory")
    common(a)
    a.add_argument("--out", required=True)
    a.add_argument("--count", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--epochs", type=int)
    return p


def _config(args, base: dict | None = None) -> dict:
    sets = list(args.set)
    for flag, key in (("count", "dataset.count"), ("split", "dataset.split"),
                      ("seed", "gen.seed"), ("epochs", "train.epochs")):
        v = getattr(args, flag, None)
        if v is not None:
            sets.append(f"{key}={v}")
    return pipeline.load_config(args.config, sets, base)


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verb == "gen":
        m = pipeline.cmd_gen(_config(args), args.out, traces=args.traces or None)
        print(f"wrote {len(m.files)} files to {args.out}")
    elif args.verb == "train":
        cfg = _config(args, pipeline.dataset_config(args.dataset))
        pipeline.cmd_train(args.dataset, args.out, cfg, on_epoch=_progress if args.verbose else None)
        print(f"checkpoint {Path(args.out) / 'checkpoint.json'}")
    elif args.verb == "extract":
        ex = pipeline.cmd_extract(args.trace, args.checkpoint, args.out, _config(args), args.noise)
        print(" ".join(k.value for k in ex.sequence))
    elif args.verb == "eval":
        cfg = _config(args, pipeline.dataset_config(args.dataset))
        pipeline.cmd_eval(args.dataset, args.checkpoint, args.out, cfg)
        print((Path(args.out) / "metrics.tsv").read_text(), end="")
    elif args.verb == "e2e":
        m = pipeline.cmd_e2e(_config(args), args.out, on_epoch=_progress if args.verbose else None)
        for k, v in sorted(m.metrics.items()):
            print(f"{k}\t{v:.6f}")
    return EXIT_OK


def _progress(rec) -> None:
    print(f"epoch {rec.epoch}\tloss {rec.train_loss:.4f}\tval_ler {rec.val_ler}", file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except (pipeline.UsageError, GenerationError) as e:
        print(f"archsleuth: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergence as e:
        print(f"archsleuth: training failed: {e}", file=sys.stderr)
        return EXIT_TRAIN
    except TraceParseError as e:
        print(f"archsleuth: cannot parse trace ({e})", file=sys.stderr)
        return EXIT_PARSE
    except pipeline.DataParseError as e:
        print(f"archsleuth: cannot parse dataset ({e})", file=sys.stderr)
        return EXIT_PARSE
    except pipeline.StageError as e:
        if isinstance(e.cause, TraceParseError):
            print(f"archsleuth: cannot parse trace ({e.cause})", file=sys.stderr)
            return EXIT_PARSE
        print(f"archsleuth: stage {e}", file=sys.stderr)
        return 1
    except CheckpointError as e:
        print(f"archsleuth: bad checkpoint: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except pipeline.MismatchError as e:
        print(f"archsleuth: mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except FileNotFoundError as e:
        print(f"archsleuth: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
