import numpy as np
import pytest
import torch

from pbprompt.corpus import MASK, PromptInstance, PromptType, apply_custom_masking, AnnotatedSentence, Span
from pbprompt.position import (
    PositionEmbeddingTable,
    all_mask_position_sequences,
    lookup_embeddings,
    mask_relative_ids,
)

# [M] x2 x3 [M] x5 x6 [M]
THREE_MASK_SPANS = [(0, 0), (3, 3), (6, 6)]


def three_mask_prompt():
    tokens = [MASK, "x2", "x3", MASK, "x5", "x6", MASK]
    return PromptInstance(tokens, THREE_MASK_SPANS, [("a",), ("b",), ("c",)], PromptType.MIXED)


def brute_ids(n, spans, anchor):
    a, b = spans[anchor]
    out = []
    for j in range(n):
        if j < a:
            out.append(j - a)
        elif j > b:
            out.append(j - b)
        else:
            out.append(0)
    return out


@pytest.mark.parametrize("anchor,expected", [
    (0, [0, 1, 2, 3, 4, 5, 6]),
    (1, [-3, -2, -1, 0, 1, 2, 3]),
    (2, [-6, -5, -4, -3, -2, -1, 0]),
])
def test_enumerated_three_mask_example(anchor, expected):
    assert list(mask_relative_ids(7, THREE_MASK_SPANS, anchor).ids) == expected


def test_single_token():
    assert mask_relative_ids(1, [(0, 0)], 0).ids == (0,)


def test_multi_token_anchor():
    assert list(mask_relative_ids(6, [(2, 3)], 0).ids) == [-2, -1, 0, 0, 1, 2]


def test_invalid_anchor():
    with pytest.raises(IndexError):
        mask_relative_ids(7, THREE_MASK_SPANS, 3)


def test_all_sequences_for_mixed_prompt():
    seqs = all_mask_position_sequences(three_mask_prompt())
    assert [list(s.ids) for s in seqs] == [
        [0, 1, 2, 3, 4, 5, 6], [-3, -2, -1, 0, 1, 2, 3], [-6, -5, -4, -3, -2, -1, 0]]
    assert [s.anchor_span_index for s in seqs] == [0, 1, 2]


def test_single_mask_reduces_to_mask_relative_ids():
    p = apply_custom_masking(AnnotatedSentence("a b c d".split(), [Span(2, 2)]))
    (seq,) = all_mask_position_sequences(p)
    assert seq == mask_relative_ids(4, p.mask_spans, 0)


def test_two_spans_have_distinct_zero_positions():
    p = apply_custom_masking(AnnotatedSentence("a b c d e f".split(), [Span(1, 1), Span(4, 5)]))
    seqs = all_mask_position_sequences(p)
    zeros = [tuple(j for j, i in enumerate(s.ids) if i == 0) for s in seqs]
    assert zeros == [(1,), (4, 5)]


def test_no_blank_rejected():
    p = apply_custom_masking(AnnotatedSentence("a b".split()))
    with pytest.raises(ValueError):
        all_mask_position_sequences(p)


def test_ids_match_brute_force_random_layouts():
    rng = np.random.default_rng(0)
    for _ in range(500):
        n = int(rng.integers(1, 40))
        cuts = sorted(rng.choice(n, size=min(n, int(rng.integers(1, 7))), replace=False).tolist())
        spans = [(c, c) for c in cuts]
        anchor = int(rng.integers(len(spans)))
        seq = mask_relative_ids(n, spans, anchor)
        assert list(seq.ids) == brute_ids(n, spans, anchor)


def test_zero_count_and_monotonicity():
    rng = np.random.default_rng(1)
    for _ in range(300):
        n = int(rng.integers(1, 30))
        a = int(rng.integers(n))
        b = int(rng.integers(a, n))
        ids = mask_relative_ids(n, [(a, b)], 0).ids
        assert ids.count(0) == b - a + 1
        outside = [i for j, i in enumerate(ids) if not a <= j <= b]
        assert all(x < y for x, y in zip(outside, outside[1:]))


def test_shift_covariance_single_token_anchor():
    for n in range(1, 20):
        for i in range(n):
            assert list(mask_relative_ids(n, [(i, i)], 0).ids) == [j - i for j in range(n)]


# --- embedding table -------------------------------------------------------


def test_table_shape_and_init_range():
    t = PositionEmbeddingTable(16, 8)
    assert t.weight.shape == (32, 8)
    assert t.weight.abs().max() <= 0.05


def test_lookup_zero_maps_to_row_n_max():
    t = PositionEmbeddingTable(10, 4)
    out = lookup_embeddings(t, [0])
    assert torch.equal(out[0], t.weight[10])


def test_lookup_boundaries():
    t = PositionEmbeddingTable(10, 4)
    out = lookup_embeddings(t, [-10, 9])
    assert torch.equal(out[0], t.weight[0])
    assert torch.equal(out[1], t.weight[19])


def test_lookup_out_of_range():
    t = PositionEmbeddingTable(10, 4)
    with pytest.raises(ValueError, match="n_max"):
        lookup_embeddings(t, [10])
    with pytest.raises(ValueError):
        lookup_embeddings(t, [-11])


def test_index_map_is_bijection():
    t = PositionEmbeddingTable(12, 2)
    rows = t.rows(torch.arange(-12, 12))
    assert sorted(rows.tolist()) == list(range(24))


def test_lookup_in_range_for_random_sequences():
    n_max = 40
    t = PositionEmbeddingTable(n_max, 3)
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, n_max + 1))
        a = int(rng.integers(n))
        b = int(rng.integers(a, n))
        seq = mask_relative_ids(n, [(a, b)], 0)
        rows = t.rows(torch.tensor(seq.ids))
        assert rows.min() >= 0 and rows.max() < 2 * n_max
        out = lookup_embeddings(t, seq)
        assert out.shape == (n, 3)
