#!/usr/bin/env python3
"""Corpus-size scaling benchmark: generative recall vs exhaustive dense scan.

Trains a small reference model once, then measures per-query latency of
both retrieval paths over synthetic corpora of increasing size.

Usage: python scripts/run_scaling.py [--sizes 1000,5000,10000,50000] [--out scaling.csv]
"""

import argparse
import sys

import torch


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", default="1000,5000,10000,50000")
    parser.add_argument("--out", default="scaling.csv")
    parser.add_argument("--queries", type=int, default=50)
    parser.add_argument("--beam-size", type=int, default=32)
    args = parser.parse_args()

    torch.set_num_threads(1)
    from genret.cotrain import TrainConfig, train
    from genret.evalbench import scaling_bench
    from genret.search import build_engine
    from genret.synthgen import SynthConfig, generate, split

    base = SynthConfig(n_videos=400, facets_per_video=4, d_f=64, facet_noise=0.05,
                       queries_per_facet=4, min_angle_deg=75.0, seed=42)
    corpus = generate(base)
    train_v, train_q, _, _ = split(corpus, 0.5, 42)
    cfg = TrainConfig(batch_size=256, learning_rate=3e-3, seed=42,
                      align_epochs=2, later_align_epochs=1, train_epochs=2)
    trainer = train(cfg, train_v, train_q)
    print("reference model trained", flush=True)

    def factory(n: int):
        synth = SynthConfig(n_videos=n, facets_per_video=4, d_f=64, facet_noise=0.05,
                            queries_per_facet=1, min_angle_deg=75.0, seed=42 + n)
        big = generate(synth)
        engine = build_engine(trainer.model, big.videos)
        return engine, big.queries.features[: args.queries]

    sizes = [int(s) for s in args.sizes.split(",")]
    result = scaling_bench(sizes, factory, beam_size=args.beam_size,
                           queries_per_size=args.queries)
    with open(args.out, "w") as fh:
        fh.write("n,t_recall_ms,t_dense_ms\n")
        for row in result["rows"]:
            fh.write(f"{row['n']},{row['t_recall_ms']:.6f},{row['t_dense_ms']:.6f}\n")
            print(f"N={row['n']:>7}  recall {row['t_recall_ms']:8.3f} ms  "
                  f"dense {row['t_dense_ms']:8.3f} ms", flush=True)
    fit = result["dense_fit"]
    print(f"dense scan fit: slope {fit['slope_ms_per_item']:.3e} ms/item "
          f"R^2 {fit['r_squared']:.4f}")
    print(f"recall max/min across sizes: {result['recall_max_over_min']:.2f}")
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
