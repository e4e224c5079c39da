"""Train the synthetic corpus at several weight-init scales.

Prints best validation F1 and the final/first stream-distance ratio for each
scale. ``0`` means the fan-in default 1/sqrt(d_emb).

    python3 scripts/init_scale_sweep.py --scales 0.02 0.1 0 0.2 --videos 600
"""

import argparse
import logging
import tempfile
import time

from sceneforge.config import resolve_config
from sceneforge.pipeline import open_corpus, train_corpus
from sceneforge.synthetic import SyntheticSpec, generate_synthetic_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--scales", type=float, nargs="+", default=[0.02, 0.1, 0.0, 0.2])
    ap.add_argument("--videos", type=int, default=600)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--max-epochs", type=int, default=50)
    args = ap.parse_args()
    logging.getLogger("sceneforge").setLevel(logging.ERROR)

    with tempfile.TemporaryDirectory() as tmp:
        generate_synthetic_dataset(SyntheticSpec(n_videos=args.videos, seed=args.seed), tmp)
        corpus = open_corpus(f"{tmp}/manifest.jsonl")
        print(f"{'init_std':>9s} {'val_f1':>7s} {'epochs':>6s} {'dist_ratio':>10s} {'secs':>6s}")
        for scale in args.scales:
            cfg = resolve_config("synthetic")
            cfg.model.init_std = scale
            cfg.train.seed = args.seed
            cfg.train.max_epochs = args.max_epochs
            t0 = time.perf_counter()
            _, rep, _ = train_corpus(cfg, corpus)
            ratio = rep.epochs[-1].val_stream_distance / rep.epochs[0].val_stream_distance
            label = f"{scale:g}" if scale else "fan-in"
            print(f"{label:>9s} {rep.best_val_f1:7.3f} {len(rep.epochs):6d} {ratio:10.3f} {time.perf_counter() - t0:6.0f}")


if __name__ == "__main__":
    main()
