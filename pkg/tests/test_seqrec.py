import math

import numpy as np
import pytest

from gradoracle import gradcheck
from xsmoe import numerics as nm
from xsmoe.errors import ContractError, ShapeError
from xsmoe.numerics import Tensor
from xsmoe.seqrec import (
    PopularityTable,
    SeqEncoder,
    batch_loss,
    build_popularity,
    pad_sequences,
    score,
)


def make_encoder(dim=8, max_len=6, seed=0, dropout=0.0):
    return SeqEncoder(dim, max_len, blocks=2, heads=2, ffn_dim=dim,
                      dropout_rate=dropout, rng=np.random.default_rng(seed))


# -- encoding -------------------------------------------------------------------

def test_encode_is_deterministic_in_eval_mode():
    enc = make_encoder()
    enc.pos.data[...] = 0.0
    prefix = np.zeros((3, 8))
    a = enc.encode_sequence(prefix, training=False).data
    b = enc.encode_sequence(prefix, training=False).data
    np.testing.assert_array_equal(a, b)
    assert np.all(np.isfinite(a))


def test_encode_rejects_empty_prefix():
    enc = make_encoder()
    with pytest.raises(ContractError):
        enc.encode_sequence(np.zeros((0, 8)))


def test_encode_rejects_overlong_prefix():
    enc = make_encoder(max_len=4)
    with pytest.raises(ContractError):
        enc.encode_sequence(np.zeros((5, 8)))


def test_position_sensitivity_swapping_non_final_items():
    enc = make_encoder(seed=3)
    rng = np.random.default_rng(4)
    items = rng.normal(size=(3, 8))
    swapped = items[[1, 0, 2]]
    out_a = enc.encode_sequence(items, training=False).data
    out_b = enc.encode_sequence(swapped, training=False).data
    assert not np.allclose(out_a, out_b)


def test_single_item_prefix_ignores_pad_region_parameters():
    enc = make_encoder(seed=5)
    item = np.random.default_rng(6).normal(size=(1, 8))
    before = enc.encode_sequence(item, training=False).data.copy()
    # randomize positional embeddings at the padded positions only
    enc.pos.data[:-1, :] = np.random.default_rng(7).normal(size=(5, 8))
    after = enc.encode_sequence(item, training=False).data
    np.testing.assert_array_equal(before, after)


def test_causal_masking_blocks_future_gradients():
    enc = make_encoder(seed=8)
    L = enc.max_len
    items = Tensor(np.random.default_rng(9).normal(size=(L, 8)), requires_grad=True)
    seqs = np.arange(L)[None, :]  # position i holds item row i
    t = 2
    states = enc.encode_states(items, seqs, training=False)
    loss = nm.mean(nm.slice_axis(states, 1, t, t + 1))
    nm.backward(loss)
    grads = items.grad
    assert np.any(grads[: t + 1] != 0)
    np.testing.assert_array_equal(grads[t + 1:], 0.0)


def test_pad_sequences_left_pads_and_truncates():
    out = pad_sequences([(1, 2), (3, 4, 5, 6, 7)], max_len=4)
    np.testing.assert_array_equal(out[0], [-1, -1, 1, 2])
    np.testing.assert_array_equal(out[1], [4, 5, 6, 7])


# -- scoring --------------------------------------------------------------------

def test_score_orthogonal_vectors():
    assert score(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])) == 0.0


def test_score_identical_unit_vectors():
    v = Tensor([1.0, 0.0, 0.0])
    assert score(v, v) == 1.0


def test_score_matches_float64_dot_oracle():
    rng = np.random.default_rng(10)
    a = rng.normal(size=16).astype(np.float32)
    b = rng.normal(size=16).astype(np.float32)
    expected = float(np.dot(a.astype(np.float64), b.astype(np.float64)))
    assert abs(score(Tensor(a), Tensor(b)) - expected) < 1e-6


def test_score_rejects_mismatched_dims():
    with pytest.raises(ShapeError):
        score(Tensor([1.0, 2.0]), Tensor([1.0]))


# -- popularity -----------------------------------------------------------------

def test_popularity_single_item_single_interaction():
    pop = build_popularity([0], catalog_size=1)
    assert pop.prob(0) == 1.0


def test_popularity_direct_formula():
    pop = build_popularity([0, 0, 0, 1], catalog_size=2)
    assert pop.prob(0) == pytest.approx(4 / 6)
    assert pop.prob(1) == pytest.approx(2 / 6)


def test_popularity_sums_to_one_over_catalog():
    rng = np.random.default_rng(11)
    catalog = 57
    items = rng.integers(0, catalog, size=400).tolist()
    pop = build_popularity(items, catalog)
    total = sum(pop.prob(i) for i in range(catalog))
    assert abs(total - 1.0) < 1e-9
    assert all(pop.prob(i) > 0 for i in range(catalog))


# -- loss ------------------------------------------------------------------------

def oracle_eq8_loss(scores, targets, histories, prob_of):
    """Independent float64 brute force of the debiased in-batch objective."""
    B = len(targets)
    total = 0.0
    for u in range(B):
        pos = math.exp(float(scores[u, u]) - math.log(prob_of(targets[u])))
        den = pos
        used = set()
        for j in range(B):
            item = targets[j]
            if j == u or item in used or item == targets[u] or item in histories[u]:
                continue
            used.add(item)
            den += math.exp(float(scores[u, j]) - math.log(prob_of(item)))
        total += -math.log(pos / den)
    return total / B


def test_loss_single_row_batch_is_exactly_zero():
    pop = build_popularity([0], catalog_size=3)
    loss = batch_loss(Tensor([[2.5]]), [0], [set()], pop)
    assert loss.item() == 0.0


def test_loss_uniform_two_way_softmax_is_log_two():
    pop = build_popularity([0, 1], catalog_size=2)
    scores = Tensor([[1.0, 1.0], [1.0, 1.0]])
    loss = batch_loss(scores, [0, 1], [set(), set()], pop)
    assert loss.item() == pytest.approx(math.log(2.0), rel=1e-6)


def test_loss_matches_bruteforce_oracle_with_history_exclusion():
    rng = np.random.default_rng(12)
    B = 4
    scores = rng.normal(size=(B, B)).astype(np.float32)
    targets = [3, 7, 9, 2]
    histories = [{7}, set(), {3, 2}, set()]  # row 0 excludes row 1's target, etc.
    pop = build_popularity([3, 3, 7, 9, 2, 2, 5], catalog_size=12)
    loss = batch_loss(Tensor(scores), targets, histories, pop)
    expected = oracle_eq8_loss(scores.astype(np.float64), targets, histories, pop.prob)
    assert loss.item() == pytest.approx(expected, rel=1e-5)


def test_loss_handles_duplicate_targets_by_deduplication():
    rng = np.random.default_rng(13)
    B = 5
    scores = rng.normal(size=(B, B)).astype(np.float32)
    targets = [4, 4, 6, 4, 6]  # heavy duplication
    histories = [set() for _ in range(B)]
    pop = build_popularity([4, 6, 6], catalog_size=8)
    loss = batch_loss(Tensor(scores), targets, histories, pop)
    expected = oracle_eq8_loss(scores.astype(np.float64), targets, histories, pop.prob)
    assert loss.item() == pytest.approx(expected, rel=1e-5)


def test_loss_nonnegative_and_zero_only_without_negatives():
    rng = np.random.default_rng(14)
    pop = build_popularity([0, 1, 2], catalog_size=4)
    scores = Tensor(rng.normal(size=(3, 3)).astype(np.float32))
    loss = batch_loss(scores, [0, 1, 2], [set(), set(), set()], pop)
    assert loss.item() > 0.0
    # all rows share one target: every negative set is empty -> exactly zero
    same = batch_loss(scores, [1, 1, 1], [set(), set(), set()], pop)
    assert same.item() == 0.0


def test_loss_increases_when_positive_item_gets_more_popular():
    class FixedPop(PopularityTable):
        def __init__(self, probs):
            self._probs = probs
            self.catalog_size = len(probs)

        def prob(self, item):
            return self._probs[item]

    scores = Tensor([[0.4, -0.2], [0.1, 0.9]])
    targets = [0, 1]
    # keep item 0 out of row 1's negative pool so only row 0's term can move
    hists = [set(), {0}]
    low = batch_loss(scores, targets, hists, FixedPop({0: 0.1, 1: 0.3}))
    high = batch_loss(scores, targets, hists, FixedPop({0: 0.4, 1: 0.3}))
    assert high.item() > low.item()


def test_loss_rejects_nonpositive_popularity():
    class BrokenPop(PopularityTable):
        def __init__(self):
            self.catalog_size = 2

        def prob(self, item):
            return 0.0

    with pytest.raises(ContractError):
        batch_loss(Tensor([[0.0]]), [0], [set()], BrokenPop())


def test_loss_gradient_passes_finite_difference_check():
    def make_case(rng):
        B, d = 3, 4
        users = Tensor(rng.normal(size=(B, d)) * 0.6, requires_grad=True)
        items = Tensor(rng.normal(size=(B, d)) * 0.6, requires_grad=True)
        pop = build_popularity([0, 1, 1, 2], catalog_size=4)
        targets = [0, 1, 2]
        hists = [set(), {0}, set()]

        def closure():
            scores = nm.matmul(users, nm.transpose(items, (1, 0)))
            return batch_loss(scores, targets, hists, pop)

        return [users, items], closure

    gradcheck(make_case, seeds=range(5))


def test_encoder_end_to_end_gradient_check():
    def make_case(rng):
        enc = SeqEncoder(4, 5, blocks=1, heads=2, ffn_dim=4, dropout_rate=0.0,
                         rng=rng)
        items = Tensor(rng.normal(size=(6, 4)) * 0.5, requires_grad=True)
        seqs = pad_sequences([(0, 3, 1), (2,), (4, 5)], max_len=5)
        params = [items] + enc.parameters()

        def closure():
            users = enc.encode(items, seqs, training=False)
            return nm.mean(nm.mul(users, users))

        return params, closure

    gradcheck(make_case, seeds=range(3))
