"""Chronological chunking and the windowed train/evaluate loop.

The interaction stream is split into T+1 equal chunks. The model warms up
on chunk 0, then for each window s in [1, T-1]: (for expandable variants)
freeze-and-expand, train on the first 85% of chunk s with early stopping
on the held-out 15%, evaluate on the whole of chunk s+1, then finalize
expert utilization and prune. One report object is emitted per window,
plus a final average row.
"""

import math
import os
import resource
import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from . import seqrec
from .errors import ConfigError, ContractError, DataError, NumericalAbort
from .model import DYNAMIC_VARIANTS, RecModel
from .numerics import Tensor
from .optim import Adam
from .rng import labeled_rng

SCHEMA_VERSION = 1


@dataclass
class WindowSchedule:
    lr_init: float = 0.001
    lr_decay: float = 0.95
    lr_min: float = 0.0001
    patience: int = 5
    batch_size: int = 256
    max_epochs: int = 0

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.lr_init, cfg.lr_decay, cfg.lr_min, cfg.patience,
                   cfg.batch_size, cfg.max_epochs)

    def lr_at(self, epoch: int) -> float:
        """Learning rate in effect during 1-based `epoch`."""
        return self.lr_init * (self.lr_decay ** (epoch - 1))

    def allows(self, epoch: int) -> bool:
        """Whether `epoch` may run: its decayed lr must not fall below the
        floor, and the optional hard cap must not be exceeded."""
        if self.max_epochs and epoch > self.max_epochs:
            return False
        return self.lr_at(epoch) >= self.lr_min


class EarlyStopper:
    """Strict-improvement patience tracker over validation NDCG@10."""

    def __init__(self, patience: int):
        self.patience = int(patience)
        self.best = -1.0
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, metric: float) -> bool:
        """Record one epoch's validation metric; True means keep training."""
        if metric > self.best:
            self.best = metric
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return self.bad_epochs < self.patience


def chunk_stream(interactions, n_chunks):
    """Stable-sort by (timestamp, user, item) and split into equal chunks.

    When the count does not divide evenly, earlier chunks take one extra
    interaction, so sizes differ by at most one.
    """
    if n_chunks <= 0:
        raise ConfigError("number of chunks must be positive")
    if len(interactions) < n_chunks:
        raise ConfigError(
            f"{len(interactions)} interactions cannot fill {n_chunks} chunks"
        )
    ordered = sorted(interactions, key=lambda r: (r.ts, r.user, r.item))
    base, rem = divmod(len(ordered), n_chunks)
    chunks = []
    off = 0
    for c in range(n_chunks):
        size = base + (1 if c < rem else 0)
        chunks.append(ordered[off:off + size])
        off += size
    return chunks


def split_window(chunk):
    """First 85% of a chunk trains, the rest validates. Boundary = floor."""
    n = len(chunk)
    n_train = int(math.floor(0.85 * n))
    return chunk[:n_train], chunk[n_train:]


class Record:
    """One supervised example: predict `target` from `prefix`."""

    __slots__ = ("user", "prefix", "target", "user_pos")

    def __init__(self, user, prefix, target, user_pos):
        self.user = user
        self.prefix = prefix
        self.target = target
        self.user_pos = user_pos


class StreamDataset:
    """Chunked interactions indexed for sequential next-item training.

    Item/user ids are interned in first-appearance order; the catalog at
    any chunk boundary is a prefix of the item registry. Per-interaction
    prefixes span chunk boundaries and are truncated to the model's
    maximum sequence length.
    """

    def __init__(self, chunks, caches, modalities, max_seq_len=10):
        self.chunks = chunks
        self.caches = dict(caches)
        self.modalities = tuple(modalities)
        self.max_seq_len = int(max_seq_len)
        for m in self.modalities:
            if m not in self.caches:
                raise DataError(f"no feature cache supplied for modality '{m}'")
        self._build()

    def _build(self):
        self.item_registry = []
        self.item_index = {}
        self.user_index = {}
        user_seqs = []
        self.records = []            # per chunk: list[Record or None]
        self.train_counts = []       # per chunk: item_idx -> count over train part
        self.catalog_sizes = []      # registry size after each full chunk
        self.hist_len_at_train = []  # per chunk: array len users-so-far

        missing = set()
        for chunk in self.chunks:
            n_train = len(split_window(chunk)[0])
            recs = []
            counts = {}
            if n_train == 0:
                self.hist_len_at_train.append(
                    np.array([len(s) for s in user_seqs], dtype=np.int64)
                )
            for pos, inter in enumerate(chunk):
                uidx = self.user_index.setdefault(inter.user, len(self.user_index))
                if uidx == len(user_seqs):
                    user_seqs.append([])
                iidx = self.item_index.get(inter.item)
                if iidx is None:
                    iidx = len(self.item_registry)
                    self.item_index[inter.item] = iidx
                    self.item_registry.append(inter.item)
                    for m in self.modalities:
                        if inter.item not in self.caches[m]:
                            missing.add((m, inter.item))
                seq = user_seqs[uidx]
                if seq:
                    recs.append(Record(uidx, tuple(seq[-self.max_seq_len:]), iidx, len(seq)))
                else:
                    recs.append(None)
                if pos < n_train:
                    counts[iidx] = counts.get(iidx, 0) + 1
                seq.append(iidx)
                if pos == n_train - 1:
                    self.hist_len_at_train.append(
                        np.array([len(s) for s in user_seqs], dtype=np.int64)
                    )
            self.records.append(recs)
            self.train_counts.append(counts)
            self.catalog_sizes.append(len(self.item_registry))
        self.user_seqs = user_seqs
        if missing:
            listing = ", ".join(f"{m}:{iid}" for m, iid in sorted(missing)[:50])
            raise DataError(
                f"{len(missing)} item/modality pairs lack cached features: {listing}"
            )

    @property
    def n_chunks(self):
        return len(self.chunks)

    def catalog_at(self, chunk_idx) -> int:
        return self.catalog_sizes[chunk_idx]

    def train_records(self, chunk_idx):
        n_train = len(split_window(self.chunks[chunk_idx])[0])
        return [r for r in self.records[chunk_idx][:n_train] if r is not None]

    def val_records(self, chunk_idx):
        n_train = len(split_window(self.chunks[chunk_idx])[0])
        return [r for r in self.records[chunk_idx][n_train:] if r is not None]

    def test_records(self, chunk_idx, fraction=1.0):
        recs = self.records[chunk_idx]
        keep = len(recs) if fraction >= 1.0 else int(math.floor(fraction * len(recs)))
        return [r for r in recs[:keep] if r is not None]

    def history_sets_at_train(self, chunk_idx, users):
        """Interacted-item sets per user as of the end of D_s^train."""
        lens = self.hist_len_at_train[chunk_idx]
        out = {}
        for u in users:
            k = lens[u] if u < len(lens) else 0
            out[u] = set(self.user_seqs[u][:k])
        return out

    def stacks_for(self, item_indices):
        """{modality: (n, M+1, d)} feature stacks for registry indices."""
        out = {}
        for m in self.modalities:
            cache = self.caches[m]
            out[m] = np.stack([
                cache.stack(self.item_registry[i]) for i in item_indices
            ])
        return out

    def popularity_for(self, chunk_idx) -> seqrec.PopularityTable:
        return seqrec.PopularityTable(
            self.train_counts[chunk_idx], self.catalog_at(chunk_idx)
        )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _catalog_embeddings(model, dataset, catalog_n, slice_size=2048):
    parts = []
    with nm.no_grad():
        for lo in range(0, catalog_n, slice_size):
            idx = range(lo, min(lo + slice_size, catalog_n))
            stacks = dataset.stacks_for(idx)
            parts.append(model.item_embeddings(stacks, training=False).data)
    return np.concatenate(parts, axis=0)


def _rank_of_target(scores, target):
    s_t = scores[target]
    better = int(np.sum(scores > s_t))
    tied_lower = int(np.sum((scores == s_t) & (np.arange(len(scores)) < target)))
    return 1 + better + tied_lower


def evaluate_records(model, dataset, records, catalog_n, filter_seen=False,
                     batch_size=512, workers=1):
    """Full-catalog ranking metrics over next-item records.

    Targets outside the catalog count as misses and are tallied in the
    returned diagnostics. Score ties break toward the lower item index.
    """
    if not records:
        return {"hr_at_10": 0.0, "ndcg_at_10": 0.0, "cases": 0, "missing_targets": 0}
    cat = _catalog_embeddings(model, dataset, catalog_n).astype(np.float64)
    item_tensor = Tensor(cat)

    def eval_batch(batch):
        seqs = seqrec.pad_sequences([r.prefix for r in batch], model.encoder.max_len)
        with nm.no_grad():
            users = model.encode_users(item_tensor, seqs, training=False).data
        users = users.astype(np.float64)
        scores = users @ cat.T
        hr = ndcg = 0.0
        missing = 0
        for row, rec in enumerate(batch):
            if rec.target >= catalog_n:
                missing += 1
                continue
            s = scores[row]
            if filter_seen:
                seen = [i for i in dataset.user_seqs[rec.user][:rec.user_pos]
                        if i < catalog_n and i != rec.target]
                if seen:
                    s = s.copy()
                    s[seen] = -np.inf
            rank = _rank_of_target(s, rec.target)
            if rank <= 10:
                hr += 1.0
                ndcg += 1.0 / math.log2(rank + 1)
        return hr, ndcg, missing

    batches = [records[i:i + batch_size] for i in range(0, len(records), batch_size)]
    # hold no_grad across the whole section: the flag is a process-wide global,
    # so per-thread enter/exit could race
    with nm.no_grad():
        if workers > 1 and len(batches) > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(eval_batch, batches))
        else:
            results = [eval_batch(b) for b in batches]

    hr = sum(r[0] for r in results)
    ndcg = sum(r[1] for r in results)
    missing = sum(r[2] for r in results)
    n = len(records)
    return {
        "hr_at_10": hr / n,
        "ndcg_at_10": ndcg / n,
        "cases": n,
        "missing_targets": missing,
    }


# ---------------------------------------------------------------------------
# one training window
# ---------------------------------------------------------------------------

def _train_batch(model, dataset, batch, pop, histories):
    """One optimization step; returns the loss value."""
    uniq = sorted({i for r in batch for i in r.prefix} | {r.target for r in batch})
    local = {g: i for i, g in enumerate(uniq)}
    stacks = dataset.stacks_for(uniq)
    items = model.item_embeddings(stacks, training=True)
    seqs = seqrec.pad_sequences(
        [[local[i] for i in r.prefix] for r in batch], model.encoder.max_len
    )
    users = model.encode_users(items, seqs, training=True)
    targets_local = np.array([local[r.target] for r in batch])
    target_vecs = nm.embedding_lookup(items, targets_local)
    scores = nm.matmul(users, nm.transpose(target_vecs, (1, 0)))
    loss = seqrec.batch_loss(
        scores, [r.target for r in batch], [histories[r.user] for r in batch], pop
    )
    return loss


def _resolve_workers(cfg):
    return cfg.eval_workers if cfg.eval_workers > 0 else (os.cpu_count() or 1)


def run_window(model, dataset, window, cfg, is_warmup=False):
    """Train on chunk `window`, early-stop on its validation slice, restore
    the best weights, then evaluate on chunk `window`+1 (unless warming up).
    """
    t_start = time.monotonic()
    sched = WindowSchedule.from_config(cfg)
    dynamic = model.variant in DYNAMIC_VARIANTS and not is_warmup
    train = dataset.train_records(window)
    val = dataset.val_records(window)
    degenerate = len(dataset.chunks[window]) < 2
    pop = dataset.popularity_for(window)
    histories = dataset.history_sets_at_train(window, {r.user for r in train})
    census_before = model.expert_census()

    optimizer = Adam(model.parameters(), lr=sched.lr_init)
    stopper = EarlyStopper(sched.patience)
    best_snap = model.snapshot()
    epoch = 0
    while sched.allows(epoch + 1):
        epoch += 1
        optimizer.lr = sched.lr_at(epoch)
        if dynamic:
            for net in model.side_nets.values():
                net.reset_utilization()
            model.arm_utilization(True)
        order = labeled_rng(cfg.seed, f"shuffle/w{window}/e{epoch}").permutation(len(train))
        for lo in range(0, len(train), sched.batch_size):
            batch = [train[i] for i in order[lo:lo + sched.batch_size]]
            loss = _train_batch(model, dataset, batch, pop, histories)
            if not np.isfinite(loss.data).all():
                model.restore(best_snap)
                raise NumericalAbort(
                    f"non-finite loss in window {window}, epoch {epoch}; "
                    f"weights restored to epoch {stopper.best_epoch}"
                )
            nm.backward(loss)
            optimizer.step()
            optimizer.zero_grad()
        if dynamic:
            model.arm_utilization(False)

        if degenerate or not val:
            break  # nothing to validate against: single fixed epoch
        metrics = evaluate_records(
            model, dataset, val, dataset.catalog_at(window),
            filter_seen=cfg.filter_seen, workers=_resolve_workers(cfg),
        )
        improved = metrics["ndcg_at_10"] > stopper.best
        keep_going = stopper.update(epoch, metrics["ndcg_at_10"])
        if improved:
            best_snap = model.snapshot()
        if not keep_going:
            break

    if epoch == 0:
        raise ContractError("schedule permits no epochs: lr_init below lr_min")
    best_ndcg = stopper.best
    best_epoch = stopper.best_epoch
    if val and not degenerate:
        model.restore(best_snap)

    report = {
        "schema_version": SCHEMA_VERSION,
        "window": window,
        "hr_at_10": None,
        "ndcg_at_10": None,
        "epochs": epoch,
        "best_epoch": best_epoch,
        "val_ndcg_at_10": best_ndcg if best_ndcg >= 0 else None,
        "experts_per_layer": None,
        "total_params": None,
        "trainable_params": None,
        "wall_clock_s": 0.0,
    }

    if not is_warmup and window + 1 < dataset.n_chunks:
        test = dataset.test_records(window + 1, cfg.eval_next_chunk_fraction)
        metrics = evaluate_records(
            model, dataset, test, dataset.catalog_at(window + 1),
            filter_seen=cfg.filter_seen, workers=_resolve_workers(cfg),
        )
        report["hr_at_10"] = metrics["hr_at_10"]
        report["ndcg_at_10"] = metrics["ndcg_at_10"]
        report["test_cases"] = metrics["cases"]
        report["missing_target_cases"] = metrics["missing_targets"]

    # a window that produced no armed training samples (e.g. a degenerate
    # chunk) yields no utilization evidence, so nothing can be pruned
    prune_events = (model.finalize_and_prune(cfg.tau)
                    if dynamic and model.utilization_samples() > 0 else [])
    census_after = model.expert_census()
    params = model.param_report()
    report["experts_per_layer"] = {
        m: {"before_prune": census_before.get(m, []), "after_prune": census_after.get(m, [])}
        for m in set(census_before) | set(census_after)
    }
    report["prune_events"] = prune_events
    report["total_params"] = params["full_total"]
    report["trainable_params"] = params["full_trainable"]
    report["side_params"] = params["side"]
    if cfg.measure_timing:
        report["wall_clock_s"] = time.monotonic() - t_start
        report["peak_rss_mb"] = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
    else:
        report["peak_rss_mb"] = 0.0
    return report


def run_stream(dataset: StreamDataset, cfg, on_window=None):
    """Warm up on chunk 0, then run windows 1 .. T-1. Returns the report
    list: one warm-up row, one row per window, and a final average row."""
    if dataset.n_chunks < 3:
        raise ConfigError("need at least 3 chunks (warm-up, train, test)")
    model = RecModel.build(
        cfg.variant, cfg.seed, cfg.d, cfg.d_prime, cfg.d_embed, cfg.side_layers,
        group_factor=cfg.group_factor, max_seq_len=cfg.max_seq_len,
        blocks=cfg.blocks, heads=cfg.heads, ffn_dim=cfg.ffn_dim,
        dropout=cfg.dropout,
        include_backbone_in_utilization=cfg.utilization_includes_backbone,
    )
    for m in dataset.modalities:
        cache = dataset.caches[m]
        if cache.dim != cfg.d or cache.layers != cfg.side_layers + 1:
            raise DataError(
                f"{m} cache geometry (layers={cache.layers}, dim={cache.dim}) does not "
                f"match config (side_layers+1={cfg.side_layers + 1}, d={cfg.d})"
            )

    reports = [run_window(model, dataset, 0, cfg, is_warmup=True)]
    if on_window:
        on_window(model, reports[-1])
    for s in range(1, dataset.n_chunks - 1):
        if model.variant in DYNAMIC_VARIANTS:
            model.expand(s)
        reports.append(run_window(model, dataset, s, cfg))
        if on_window:
            on_window(model, reports[-1])

    tested = [r for r in reports if r["hr_at_10"] is not None]
    avg = {
        "schema_version": SCHEMA_VERSION,
        "window": "avg",
        "hr_at_10": float(np.mean([r["hr_at_10"] for r in tested])) if tested else None,
        "ndcg_at_10": float(np.mean([r["ndcg_at_10"] for r in tested])) if tested else None,
        "epochs": int(sum(r["epochs"] for r in reports)),
        "wall_clock_s": float(sum(r["wall_clock_s"] for r in reports)),
    }
    reports.append(avg)
    return reports, model
