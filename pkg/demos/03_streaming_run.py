#!/usr/bin/env python3
"""A small end-to-end streaming run on synthetic drifting preferences.

Generates a 6-window stream, trains with expansion and pruning, and prints
the per-window report rows. Takes roughly half a minute on a laptop CPU.
"""

import numpy as np

from xsmoe.config import RunConfig
from xsmoe.data import synthesize
from xsmoe.stream import StreamDataset, chunk_stream, run_stream

cfg = RunConfig(
    seed=0, variant="xsmoe", chunks=6, tau=0.1, max_epochs=6,
    dropout=0.0, batch_size=128, measure_timing=True, eval_workers=1,
).validate()

print("synthesizing a drifting stream (600 users, 200 items, 6 windows)...")
world = synthesize(cfg.seed, users=600, items=200, windows=cfg.chunks,
                   drift=0.5, interactions_per_window=1200,
                   dim=cfg.d, depth=cfg.side_layers)
chunks = chunk_stream(world.interactions, cfg.chunks)
dataset = StreamDataset(chunks, world.caches, cfg.required_modalities(),
                        max_seq_len=cfg.max_seq_len)

reports, model = run_stream(dataset, cfg)
print(f"\n{'window':>6} {'HR@10':>8} {'NDCG@10':>8} {'epochs':>6} "
      f"{'experts/layer':>14} {'side params':>11}")
for rep in reports:
    if rep["window"] == "avg":
        print(f"{'AVG':>6} {rep['hr_at_10']:>8.4f} {rep['ndcg_at_10']:>8.4f}")
        continue
    census = rep["experts_per_layer"]["visual"]["after_prune"]
    hr = f"{rep['hr_at_10']:.4f}" if rep["hr_at_10"] is not None else "-"
    nd = f"{rep['ndcg_at_10']:.4f}" if rep["ndcg_at_10"] is not None else "-"
    side = sum(c["total"] for c in rep["side_params"].values())
    print(f"{rep['window']:>6} {hr:>8} {nd:>8} {rep['epochs']:>6} "
          f"{str(census):>14} {side:>11}")

print("\nfrozen experts retained:", len(model.freeze_log))
