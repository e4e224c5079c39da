"""Synthetic end-to-end run: generate, train, then report the numbers the acceptance suite checks.

    python3 scripts/run_synthetic_acceptance.py --out runs/synth600 [--videos 600] [--seed 0]
"""

import argparse
import logging
import json
import time
from pathlib import Path

import numpy as np

from sceneforge import nontemporal
from sceneforge.config import resolve_config
from sceneforge.data import FeatureCache, read_manifest
from sceneforge.inference import Selection, both_stream_f1, evaluate, infer, write_report
from sceneforge.pipeline import nontemporal_label_ranks, open_corpus, register_label, train_corpus
from sceneforge.synthetic import SyntheticSpec, SyntheticTruth, generate_synthetic_dataset, oracle_f1


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/synth600")
    ap.add_argument("--videos", type=int, default=600)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", default="synthetic")
    args = ap.parse_args()
    logging.getLogger("sceneforge").setLevel(logging.ERROR)

    out = Path(args.out)
    data = out / "data"
    generate_synthetic_dataset(SyntheticSpec(n_videos=args.videos, seed=args.seed), data)
    corpus = open_corpus(data / "manifest.jsonl")
    truth = SyntheticTruth.load(data / "truth.json")
    cfg = resolve_config(args.config)
    cfg.train.seed = args.seed

    t0 = time.perf_counter()
    model, report, _ = train_corpus(
        cfg,
        corpus,
        checkpoint=out / "model.ckpt",
        on_epoch=lambda r, *_: print(f"epoch {r.epoch:3d}  loss {r.loss_total:8.4f}  val_f1 {r.val_f1:.4f}  dist {r.val_stream_distance:.3f}"),
    )
    seconds = time.perf_counter() - t0

    cache = FeatureCache()
    split = corpus.split
    summary = {
        "train_seconds": seconds,
        "epochs": len(report.epochs),
        "best_epoch": report.best_epoch,
        "val_f1": report.best_val_f1,
        "val_oracle_f1": oracle_f1(split.validation, truth, cache),
        "distance_first": report.epochs[0].val_stream_distance,
        "distance_last": report.epochs[-1].val_stream_distance,
    }
    summary["distance_ratio"] = summary["distance_last"] / summary["distance_first"]

    nontemporal.op_counter.clear()
    infer(model, split.test, Selection(threshold=0.0), cache)
    summary["infer_nontemporal_ops"] = sum(nontemporal.op_counter.values())
    summary["test_f1_temporal"], summary["test_f1_stream_average"] = both_stream_f1(model, split.test, cache)
    test_report = evaluate(model, split.test, cache=cache)
    write_report(out / "test_report.txt", test_report)
    summary["test_rp90"] = test_report.rp90

    if truth.heldout:
        held = truth.heldout
        _, records = read_manifest(data / held["manifest"])
        center = np.asarray(held["center"])
        vec = center + 0.05 * np.random.default_rng(1).normal(size=center.shape)
        h = register_label(model, held["name"], held["parent"], held["token"], vec)
        ranks = nontemporal_label_ranks(model, h, records, held["name"], cache)
        summary["heldout_top2_share"] = float((ranks <= 2).mean())

    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for k, v in summary.items():
        print(f"{k:24s} {v:.4f}" if isinstance(v, float) else f"{k:24s} {v}")


if __name__ == "__main__":
    main()
