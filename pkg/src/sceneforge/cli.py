"""Command-line entry point: ``sceneforge {train,eval,infer,synth,gradcheck,inspect}``.

Exit status is 0 on success, 1 for usage or validation problems and 2 for
runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from .checkpoint import CheckpointFormatError, read_checkpoint
from .config import PRESETS, resolve_config
from .data import ManifestParseError, ValidationError
from .inference import Selection, evaluate, infer, write_predictions, write_report
from .numerics import ConfigError
from .pipeline import gradcheck_model, load_model, open_corpus, tiny_corpus, train_corpus
from .synthetic import SyntheticSpec, SyntheticSpecError, generate_synthetic_dataset
from .tensorio import TensorFormatError

log = logging.getLogger("sceneforge")

VALIDATION_ERRORS = (
    ConfigError,
    ValidationError,
    ManifestParseError,
    CheckpointFormatError,
    TensorFormatError,
    SyntheticSpecError,
    FileNotFoundError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _selection(args) -> Selection:
    if args.topk is not None:
        return Selection(topk=args.topk)
    return Selection(threshold=0.0 if args.threshold is None else args.threshold)


def _records(corpus, split: str):
    if split == "all":
        return corpus.records
    return [r for r in corpus.records if r.split == split]


def _config(args):
    cfg = resolve_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if getattr(args, "deterministic", False):
        cfg.train.deterministic = True
    return cfg


def cmd_synth(args) -> int:
    spec = SyntheticSpec(n_videos=args.videos, seed=args.seed if args.seed is not None else 0, noise=args.noise)
    generate_synthetic_dataset(spec, args.out)
    print(f"wrote {args.videos} videos to {Path(args.out) / 'manifest.jsonl'}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    corpus = open_corpus(args.manifest)

    def show(rec, model, state):
        print(
            f"epoch {rec.epoch:3d}  loss {rec.loss_total:.4f}  t {rec.loss_t:.4f}  nt {rec.loss_nt:.4f}"
            f"  distill {rec.loss_distill:.4f}  val_f1 {rec.val_f1:.4f}  dist {rec.val_stream_distance:.4f}"
        )

    _, report, _ = train_corpus(cfg, corpus, checkpoint=args.out, on_epoch=show)
    trace = [vars(e) for e in report.epochs]
    with open(f"{args.out}.trace.json", "w", encoding="utf-8") as fh:
        json.dump({"best_epoch": report.best_epoch, "best_val_f1": report.best_val_f1, "epochs": trace}, fh, indent=1)
        fh.write("\n")
    print(f"best val_f1 {report.best_val_f1:.4f} at epoch {report.best_epoch}; checkpoint {args.out}")
    return 0


def cmd_eval(args) -> int:
    corpus = open_corpus(args.manifest)
    model = load_model(args.checkpoint, corpus)
    records = _records(corpus, args.split)
    if not records:
        raise ValidationError(f"no records in split {args.split!r}")
    report = evaluate(model, records, _selection(args))
    sys.stdout.write(report.to_text())
    if args.out:
        write_report(args.out, report)
    return 0


def cmd_infer(args) -> int:
    corpus = open_corpus(args.manifest)
    model = load_model(args.checkpoint, corpus)
    preds = infer(model, _records(corpus, args.split), _selection(args))
    if args.out:
        write_predictions(args.out, preds)
    else:
        for p in preds:
            print(json.dumps(p.to_json(), sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    corpus = open_corpus(args.manifest) if args.manifest else tiny_corpus(cfg.train.seed)
    res = gradcheck_model(cfg, corpus)
    print(f"max relative error {res.max_error:.3e} over {res.n_checked} parameters")
    print(f"inert parameters {res.n_inert}, max |grad| {res.inert_max_grad:.3e}")
    return 0 if res.max_error < 1e-3 else 2


def cmd_inspect(args) -> int:
    if args.checkpoint:
        ck = read_checkpoint(args.checkpoint)
        st = ck.state
        print(f"checkpoint {args.checkpoint}")
        print(f"parameters {len(ck.store)} tensors, {ck.store.num_parameters()} values, dtype {ck.store.dtype}")
        best = "none" if math.isinf(st.best_metric) else f"{st.best_metric:.4f}"
        print(f"epoch {st.epoch} step {st.step} best_metric {best} best_epoch {st.best_epoch}")
        for k, v in ck.config.to_flat().items():
            print(f"  {k}={v}")
    if args.manifest:
        corpus = open_corpus(args.manifest)
        h = corpus.header.hierarchy
        counts = {s: len(_records(corpus, s)) for s in ("train", "validation", "test")}
        print(f"manifest {args.manifest}")
        print(f"labels {len(h.level1)} level-1 / {len(h.level2)} level-2")
        print("videos " + " ".join(f"{k}={v}" for k, v in counts.items()))
        print("dims " + " ".join(f"{k}={v}" for k, v in corpus.header.dims.items()))
        print(f"embeddings {len(corpus.kstore)} tokens of width {corpus.kstore.d_kg}")
    if not (args.checkpoint or args.manifest):
        raise UsageError("inspect needs --manifest and/or --checkpoint")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sceneforge", description="Two-stream hierarchical video scene labelling.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, *flags):
        if "config" in flags:
            sp.add_argument("--config", help=f"key=value file or preset ({', '.join(PRESETS)})")
        if "seed" in flags:
            sp.add_argument("--seed", type=int)
        if "manifest" in flags:
            sp.add_argument("--manifest", required=True)
        if "checkpoint" in flags:
            sp.add_argument("--checkpoint", required=True)
        if "select" in flags:
            g = sp.add_mutually_exclusive_group()
            g.add_argument("--threshold", type=float)
            g.add_argument("--topk", type=int)
            sp.add_argument("--split", default="test", choices=["train", "validation", "test", "all"])

    sp = sub.add_parser("synth", help="write a synthetic corpus")
    sp.add_argument("--videos", type=int, default=600)
    sp.add_argument("--noise", type=float, default=0.5)
    sp.add_argument("--out", required=True)
    common(sp, "seed")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train both streams and write a checkpoint")
    common(sp, "config", "seed", "manifest")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--deterministic", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="metric report for a split")
    common(sp, "manifest", "checkpoint", "select")
    sp.add_argument("--out", help="report path (a .json twin is written next to it)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="temporal-only predictions as JSONL")
    common(sp, "manifest", "checkpoint", "select")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    common(sp, "config", "seed")
    sp.add_argument("--manifest")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("inspect", help="summarize a manifest and/or checkpoint")
    sp.add_argument("--manifest")
    sp.add_argument("--checkpoint")
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except VALIDATION_ERRORS as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except Exception as exc:  # noqa: BLE001
        sys.stderr.write(f"runtime error: {type(exc).__name__}: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
