"""Sequence encoding, scoring, and the in-batch debiased softmax loss.

Prefixes are left-padded integer index sequences into a per-batch item
embedding matrix. The encoder is a small causal transformer; the loss uses
the other rows' target items as negatives, corrected by log-popularity and
filtered against each user's interacted-item set.
"""

import math

import numpy as np

from . import numerics as nm
from .errors import ContractError, ShapeError
from .numerics import Tensor

PAD = -1
NEG_INF = -1e9


class SeqEncoder:
    """Causal transformer over item-embedding prefixes.

    Learned positional embeddings, input layer-norm + dropout, then
    `blocks` post-norm blocks of multi-head self-attention and a
    position-wise feed-forward net, residual connections around each.
    The user vector is the output at the final (most recent) position.
    """

    def __init__(self, dim, max_len, blocks=2, heads=2, ffn_dim=None,
                 dropout_rate=0.1, rng=None):
        if dim % heads != 0:
            raise ShapeError(f"encoder dim {dim} not divisible by {heads} heads")
        rng = rng or np.random.default_rng(0)
        self.dim = int(dim)
        self.max_len = int(max_len)
        self.heads = int(heads)
        self.n_blocks = int(blocks)
        self.ffn_dim = int(ffn_dim or dim)
        self.dropout_rate = float(dropout_rate)

        def mat(shape, fan_in, fan_out, name):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            t = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
            t.name = name
            return t

        def vec(n, name, fill=0.0):
            t = Tensor(np.full(n, fill), requires_grad=True)
            t.name = name
            return t

        self.pos = Tensor(rng.normal(0.0, 0.02, size=(max_len, dim)), requires_grad=True)
        self.pos.name = "enc/pos"
        self.ln_in_g = vec(dim, "enc/ln_in_g", 1.0)
        self.ln_in_b = vec(dim, "enc/ln_in_b")
        self.blocks = []
        for b in range(blocks):
            blk = {
                "wq": mat((dim, dim), dim, dim, f"enc/b{b}/wq"),
                "bq": vec(dim, f"enc/b{b}/bq"),
                "wk": mat((dim, dim), dim, dim, f"enc/b{b}/wk"),
                "bk": vec(dim, f"enc/b{b}/bk"),
                "wv": mat((dim, dim), dim, dim, f"enc/b{b}/wv"),
                "bv": vec(dim, f"enc/b{b}/bv"),
                "wo": mat((dim, dim), dim, dim, f"enc/b{b}/wo"),
                "bo": vec(dim, f"enc/b{b}/bo"),
                "ln1_g": vec(dim, f"enc/b{b}/ln1_g", 1.0),
                "ln1_b": vec(dim, f"enc/b{b}/ln1_b"),
                "w1": mat((self.ffn_dim, dim), dim, self.ffn_dim, f"enc/b{b}/w1"),
                "b1": vec(self.ffn_dim, f"enc/b{b}/b1"),
                "w2": mat((dim, self.ffn_dim), self.ffn_dim, dim, f"enc/b{b}/w2"),
                "b2": vec(dim, f"enc/b{b}/b2"),
                "ln2_g": vec(dim, f"enc/b{b}/ln2_g", 1.0),
                "ln2_b": vec(dim, f"enc/b{b}/ln2_b"),
            }
            self.blocks.append(blk)

    _BLOCK_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                   "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")

    def parameters(self):
        out = [self.pos, self.ln_in_g, self.ln_in_b]
        for blk in self.blocks:
            out.extend(blk[k] for k in self._BLOCK_KEYS)
        return out

    def _attention_mask(self, seqs: np.ndarray) -> Tensor:
        """(B, 1, L, L) additive mask: causal plus key-padding."""
        B, L = seqs.shape
        causal = np.tril(np.ones((L, L), dtype=bool))
        key_ok = (seqs >= 0)[:, None, None, :]
        allowed = causal[None, None, :, :] & key_ok
        return Tensor(np.where(allowed, 0.0, NEG_INF))

    def encode_states(self, items: Tensor, seqs: np.ndarray, training=False, rng=None):
        """Full per-position outputs (B, L, dim). `seqs` holds row indices
        into `items`, PAD (-1) marks left padding."""
        seqs = np.asarray(seqs)
        if seqs.ndim != 2 or seqs.shape[1] != self.max_len:
            raise ShapeError(f"sequences must be (B, {self.max_len}), got {seqs.shape}")
        if np.any(seqs[:, -1] < 0):
            raise ContractError("empty prefix: final sequence position is padding")
        n = items.shape[0]
        zero_row = Tensor(np.zeros((1, self.dim)))
        table = nm.concat([items, zero_row], axis=0)
        idx = np.where(seqs >= 0, seqs, n)
        x = nm.embedding_lookup(table, idx)  # (B, L, dim)
        x = nm.add(x, nm.reshape(self.pos, (1, self.max_len, self.dim)))
        x = nm.layer_norm(x, self.ln_in_g, self.ln_in_b)
        x = nm.dropout(x, self.dropout_rate, rng, training)

        mask = self._attention_mask(seqs)
        B, L = seqs.shape
        H, dh = self.heads, self.dim // self.heads
        inv_sqrt_dh = 1.0 / math.sqrt(dh)

        def split_heads(t):
            return nm.transpose(nm.reshape(t, (B, L, H, dh)), (0, 2, 1, 3))

        for blk in self.blocks:
            q = split_heads(nm.add(nm.linear(x, blk["wq"]), blk["bq"]))
            k = split_heads(nm.add(nm.linear(x, blk["wk"]), blk["bk"]))
            v = split_heads(nm.add(nm.linear(x, blk["wv"]), blk["bv"]))
            scores = nm.scale(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))), inv_sqrt_dh)
            attn = nm.softmax(nm.add(scores, mask), axis=-1)
            attn = nm.dropout(attn, self.dropout_rate, rng, training)
            ctx = nm.reshape(nm.transpose(nm.matmul(attn, v), (0, 2, 1, 3)), (B, L, self.dim))
            proj = nm.dropout(nm.add(nm.linear(ctx, blk["wo"]), blk["bo"]),
                              self.dropout_rate, rng, training)
            x = nm.layer_norm(nm.add(x, proj), blk["ln1_g"], blk["ln1_b"])
            hidden = nm.gelu(nm.add(nm.linear(x, blk["w1"]), blk["b1"]))
            ffn = nm.dropout(nm.add(nm.linear(hidden, blk["w2"]), blk["b2"]),
                             self.dropout_rate, rng, training)
            x = nm.layer_norm(nm.add(x, ffn), blk["ln2_g"], blk["ln2_b"])
        return x

    def encode(self, items: Tensor, seqs: np.ndarray, training=False, rng=None):
        """User vectors (B, dim): the final position's state."""
        states = self.encode_states(items, seqs, training=training, rng=rng)
        B = states.shape[0]
        last = nm.slice_axis(states, 1, self.max_len - 1, self.max_len)
        return nm.reshape(last, (B, self.dim))

    def encode_sequence(self, prefix, training=False, rng=None):
        """Encode one prefix given as a list/array of item embedding vectors."""
        vecs = np.asarray(prefix, dtype=np.float64)
        if vecs.ndim != 2 or vecs.shape[0] == 0:
            raise ContractError("prefix must be a non-empty list of embedding vectors")
        if vecs.shape[0] > self.max_len:
            raise ContractError(f"prefix longer than max_len={self.max_len}")
        items = Tensor(vecs)
        L = vecs.shape[0]
        seqs = np.full((1, self.max_len), PAD, dtype=np.int64)
        seqs[0, self.max_len - L:] = np.arange(L)
        return nm.reshape(self.encode(items, seqs, training=training, rng=rng), (self.dim,))


def pad_sequences(prefixes, max_len) -> np.ndarray:
    """Left-pad integer prefixes (row indices) to a fixed-width array."""
    out = np.full((len(prefixes), max_len), PAD, dtype=np.int64)
    for i, pre in enumerate(prefixes):
        take = list(pre)[-max_len:]
        if take:
            out[i, max_len - len(take):] = take
    return out


def score(e_u: Tensor, e_i: Tensor) -> float:
    """Relevance of one item for one user: a plain dot product."""
    if e_u.shape != e_i.shape:
        raise ShapeError(f"score: {e_u.shape} vs {e_i.shape}")
    return float(np.dot(e_u.data.astype(np.float64), e_i.data.astype(np.float64)))


class PopularityTable:
    """Add-one-smoothed item frequencies over one training chunk.

    Probabilities are defined for every catalog index [0, catalog_size);
    unseen items get the smoothing floor 1/(total + catalog_size).
    """

    def __init__(self, counts, catalog_size):
        self.catalog_size = int(catalog_size)
        self.counts = dict(counts)
        self.total = int(sum(self.counts.values()))
        if self.catalog_size <= 0:
            raise ContractError("popularity table needs a non-empty catalog")

    def prob(self, item: int) -> float:
        if not (0 <= item < self.catalog_size):
            raise ContractError(f"item {item} outside catalog of {self.catalog_size}")
        return (self.counts.get(item, 0) + 1) / (self.total + self.catalog_size)

    def log_probs(self, items) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log([self.prob(i) for i in items])


def build_popularity(chunk_items, catalog_size) -> PopularityTable:
    counts = {}
    for it in chunk_items:
        counts[it] = counts.get(it, 0) + 1
    return PopularityTable(counts, catalog_size)


def batch_loss(scores: Tensor, targets, histories, pop: PopularityTable) -> Tensor:
    """In-batch debiased cross-entropy.

    scores[u, v] is the score of user u against row v's target item.
    Negatives for row u are the other rows' targets, minus anything in
    u's interacted set, minus the positive itself, deduplicated by item.
    Every logit is offset by -log(popularity). Returns the batch mean.
    """
    B = scores.shape[0]
    if scores.shape != (B, B) or len(targets) != B or len(histories) != B:
        raise ShapeError(f"batch_loss: scores {scores.shape} for {len(targets)} targets")
    logp = pop.log_probs(targets)
    if np.any(~np.isfinite(logp)):
        raise ContractError("popularity table produced non-positive probability")

    first_seen = {}
    canonical = np.zeros(B, dtype=bool)
    for v, item in enumerate(targets):
        if item not in first_seen:
            first_seen[item] = v
            canonical[v] = True
    eligible = np.zeros((B, B), dtype=bool)
    for u in range(B):
        hist = histories[u]
        for v, item in enumerate(targets):
            if v == u:
                eligible[u, v] = True  # the positive
            elif canonical[v] and item != targets[u] and item not in hist:
                eligible[u, v] = True

    adjusted = nm.add(scores, Tensor(-logp[None, :]))
    masked = nm.add(adjusted, Tensor(np.where(eligible, 0.0, NEG_INF)))
    log_prob = nm.gather_rows(nm.log_softmax(masked, axis=1), np.arange(B))
    return nm.neg(nm.mean(log_prob))
