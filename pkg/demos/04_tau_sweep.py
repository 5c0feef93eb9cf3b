#!/usr/bin/env python3
"""Pruning-threshold sweep: model size versus ranking quality.

Mirrors the efficiency study: tau = 0 disables pruning entirely, larger
thresholds trade parameters for (usually little) quality.
"""

from xsmoe.config import RunConfig
from xsmoe.data import synthesize
from xsmoe.stream import StreamDataset, chunk_stream, run_stream

world = synthesize(3, users=600, items=200, windows=6, drift=0.5,
                   interactions_per_window=1200, dim=32, depth=2)
chunks = chunk_stream(world.interactions, 6)

print(f"{'tau':>6} {'AVG NDCG@10':>12} {'final side params':>18} {'experts/layer':>14}")
for tau in (0.0, 0.05, 0.1, 0.15, 0.2, 0.25):
    cfg = RunConfig(seed=3, variant="xsmoe", chunks=6, tau=tau, max_epochs=6,
                    dropout=0.0, measure_timing=False, eval_workers=1).validate()
    dataset = StreamDataset(chunks, world.caches, cfg.required_modalities(),
                            max_seq_len=cfg.max_seq_len)
    reports, model = run_stream(dataset, cfg)
    final = [r for r in reports if r["window"] != "avg"][-1]
    side = sum(c["total"] for c in final["side_params"].values())
    census = final["experts_per_layer"]["visual"]["after_prune"]
    print(f"{tau:>6} {reports[-1]['ndcg_at_10']:>12.4f} {side:>18} {str(census):>14}")
