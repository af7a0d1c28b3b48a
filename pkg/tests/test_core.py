import math

import numpy as np
import pytest
import torch

from conftest import Params, random_params, tiny_model
from pbprompt.core import (
    CheckpointError,
    attach_query_type,
    attention_logits,
    collate,
    decode_spans,
    encode,
    load_checkpoint,
    mixed_representation,
    position_attention,
    predict_tokens,
    prompt_from_text,
    prompt_representation,
    save_checkpoint,
    select_representation,
)
from pbprompt.corpus import MASK, PromptInstance, PromptType
from pbprompt.encoders import HFEncoder, Vocab
from pbprompt.position import all_mask_position_sequences, lookup_embeddings

f64 = torch.float64


def rand(rng, *shape):
    return torch.tensor(rng.normal(size=shape), dtype=f64)


# --- encode ----------------------------------------------------------------


def test_encode_deterministic_and_shape(synthetic_prompts):
    model = tiny_model(synthetic_prompts).eval()
    p = synthetic_prompts[0]
    with torch.no_grad():
        a = encode(p, model.encoder, model.vocab)
        b = encode(p, model.encoder, model.vocab)
    assert torch.equal(a, b)
    assert a.shape == (len(p.tokens), model.encoder.hidden_size)


def test_encode_meanpool_is_layer_mean(synthetic_prompts):
    model = tiny_model(synthetic_prompts).eval()
    p = synthetic_prompts[1]
    with torch.no_grad():
        pooled = encode(p, model.encoder, model.vocab, "mean_pool_all_layers")
        ids = torch.tensor([model.vocab.encode(p.tokens)])
        layers = model.encoder(ids, torch.ones_like(ids, dtype=torch.bool))
    manual = sum(layer[0] for layer in layers) / len(layers)
    assert torch.allclose(pooled, manual, atol=1e-6)


def test_encode_too_long_names_source(synthetic_prompts):
    model = tiny_model(synthetic_prompts)
    long = PromptInstance(["w1"] * 60 + [MASK], [(60, 60)], [("w2",)], PromptType.PREFIX, "doc-42")
    with pytest.raises(ValueError, match="doc-42"):
        encode(long, model.encoder, model.vocab)


# --- query-type concatenation ----------------------------------------------


def test_attach_empty_query_type_is_identity():
    H = rand(np.random.default_rng(0), 5, 7)
    assert torch.equal(attach_query_type(H, torch.zeros(0, dtype=f64)), H)


def test_attach_prepends_z_to_every_row():
    rng = np.random.default_rng(1)
    H, z = rand(rng, 5, 7), rand(rng, 3)
    out = attach_query_type(H, z)
    assert out.shape == (5, 10)
    assert torch.equal(out[:, :3], z.expand(5, 3))
    assert torch.equal(out[:, 3:], H)


def test_attach_types_differ_only_in_prefix_columns():
    rng = np.random.default_rng(2)
    H, table = rand(rng, 4, 6), rand(rng, 5, 3)
    a = attach_query_type(H, table[PromptType.PREFIX.index])
    b = attach_query_type(H, table[PromptType.MIXED.index])
    assert torch.equal(a[:, 3:], b[:, 3:])
    assert not torch.equal(a[:, :3], b[:, :3])


# --- position attention ----------------------------------------------------


def test_zero_parameters_give_uniform_attention():
    rng = np.random.default_rng(3)
    n = 6
    params = Params(torch.zeros(4, 5, dtype=f64), torch.zeros(4, 3, dtype=f64), rand(rng, 4))
    A = position_attention(rand(rng, n, 5), rand(rng, n, 3), params)
    assert torch.allclose(A, torch.full((n,), 1 / n, dtype=f64), atol=1e-15)


def test_two_position_attention_matches_scalar_formula():
    W = [[0.3, -0.2], [0.1, 0.4], [-0.5, 0.25]]
    U = [[0.7], [-0.3], [0.2]]
    V = [1.5, -0.8, 0.6]
    Hp = [[0.9, -1.1], [0.2, 0.5]]
    P = [[0.4], [-0.6]]
    logits = []
    for j in range(2):
        acc = 0.0
        for a in range(3):
            pre = sum(W[a][c] * Hp[j][c] for c in range(2)) + U[a][0] * P[j][0]
            acc += V[a] * math.tanh(pre)
        logits.append(acc)
    m = max(logits)
    expected = [math.exp(x - m) / sum(math.exp(y - m) for y in logits) for x in logits]
    params = Params(torch.tensor(W, dtype=f64), torch.tensor(U, dtype=f64), torch.tensor(V, dtype=f64))
    A = position_attention(torch.tensor(Hp, dtype=f64), torch.tensor(P, dtype=f64), params)
    assert A.tolist() == pytest.approx(expected, abs=1e-12)


def test_attention_shift_invariance():
    rng = np.random.default_rng(4)
    params = random_params(rng, 4, 5, 3)
    Hp, Ps = rand(rng, 7, 5), rand(rng, 7, 3)
    logits = attention_logits(Hp, Ps, params)
    A = position_attention(Hp, Ps, params)
    for c in (-50.0, 3.0, 200.0):
        assert torch.allclose(torch.softmax(logits + c, -1), A, atol=1e-9)


def test_attention_respects_padding_mask():
    rng = np.random.default_rng(5)
    params = random_params(rng, 4, 5, 3)
    Hp, Ps = rand(rng, 6, 5), rand(rng, 6, 3)
    mask = torch.tensor([True] * 4 + [False] * 2)
    A = position_attention(Hp, Ps, params, mask)
    assert torch.all(A[4:] == 0)
    assert torch.allclose(A[:4], position_attention(Hp[:4], Ps[:4], params), atol=1e-14)


def test_non_finite_logits_raise():
    rng = np.random.default_rng(6)
    params = random_params(rng, 4, 5, 3)
    params.V = params.V.clone()
    params.V[0] = float("nan")
    with pytest.raises(FloatingPointError):
        position_attention(rand(rng, 3, 5), rand(rng, 3, 3), params)


# --- prompt representation ---------------------------------------------------


def test_singleton_representation_is_identity():
    H = rand(np.random.default_rng(7), 1, 5)
    assert torch.equal(prompt_representation(torch.ones(1, dtype=f64), H), H)


def test_half_half_representation():
    H = torch.tensor([[1.0, 2.0], [3.0, -4.0]], dtype=f64)
    M = prompt_representation(torch.tensor([0.5, 0.5], dtype=f64), H)
    assert M.tolist() == [[0.5, 1.0], [1.5, -2.0]]


def test_representation_rows_sum_to_weighted_mean():
    rng = np.random.default_rng(8)
    H = rand(rng, 6, 4)
    A = torch.softmax(rand(rng, 6), -1)
    M = prompt_representation(A, H)
    assert torch.allclose(M.sum(0), (A[:, None] * H).sum(0) / A.sum(), atol=1e-14)


def test_pooled_variant_broadcasts():
    rng = np.random.default_rng(9)
    H = rand(rng, 5, 3)
    A = torch.softmax(rand(rng, 5), -1)
    M = prompt_representation(A, H, "pooled")
    assert M.shape == H.shape
    assert torch.allclose(M[0], A @ H) and torch.equal(M[0], M[4])


# --- mixed representation -----------------------------------------------------


def test_mixed_single_sequence_equals_single_anchor():
    rng = np.random.default_rng(10)
    params = random_params(rng, 4, 5, 3)
    Hp, Ps = rand(rng, 6, 5), rand(rng, 6, 3)
    single = prompt_representation(position_attention(Hp, Ps, params), Hp)
    assert torch.allclose(mixed_representation(Hp, [Ps], params), single, atol=1e-15)


def test_mixed_uniform_attentions():
    rng = np.random.default_rng(11)
    n = 5
    params = Params(torch.zeros(4, 5, dtype=f64), torch.zeros(4, 3, dtype=f64), rand(rng, 4))
    Hp = rand(rng, n, 5)
    M = mixed_representation(Hp, [rand(rng, n, 3), rand(rng, n, 3)], params)
    assert torch.allclose(M, Hp / n, atol=1e-15)


def test_mixed_permutation_invariant():
    rng = np.random.default_rng(12)
    params = random_params(rng, 4, 5, 3)
    Hp = rand(rng, 7, 5)
    seqs = [rand(rng, 7, 3) for _ in range(4)]
    a = mixed_representation(Hp, seqs, params)
    b = mixed_representation(Hp, seqs[::-1], params)
    assert torch.allclose(a, b, atol=1e-9)


def test_mixed_sum_variant_scales_mean():
    rng = np.random.default_rng(13)
    params = random_params(rng, 4, 5, 3)
    Hp = rand(rng, 7, 5)
    seqs = [rand(rng, 7, 3) for _ in range(3)]
    assert torch.allclose(mixed_representation(Hp, seqs, params, reduce="sum"),
                          3 * mixed_representation(Hp, seqs, params), atol=1e-12)


def test_mixed_requires_a_sequence():
    with pytest.raises(ValueError):
        mixed_representation(torch.zeros(2, 2), [], None)


# --- modes -------------------------------------------------------------------


def test_modes_coincide_at_fixed_point():
    H = rand(np.random.default_rng(14), 4, 3)
    outs = [select_representation(m, H, H.clone()) for m in ("baseline", "pbc", "contextual_pbc")]
    assert all(torch.equal(outs[0], o) for o in outs)


def test_contextual_is_elementwise_mean():
    rng = np.random.default_rng(15)
    H, M = rand(rng, 4, 3), rand(rng, 4, 3)
    assert torch.allclose(select_representation("contextual-pbc", H, M), (H + M) / 2, atol=1e-12)


def test_baseline_ignores_m():
    rng = np.random.default_rng(16)
    H, M = rand(rng, 4, 3), rand(rng, 4, 3)
    assert torch.equal(select_representation("baseline", H, M), select_representation("baseline", H, M * 7 + 1))


def test_unknown_mode():
    with pytest.raises(ValueError):
        select_representation("fancy", torch.zeros(1), torch.zeros(1))


# --- vocabulary head and decoding ---------------------------------------------


def test_zero_vocab_projection_is_uniform():
    rep = rand(np.random.default_rng(17), 3, 4)
    probs = predict_tokens(rep, torch.zeros(9, 4, dtype=f64), "gelu")
    assert torch.allclose(probs, torch.full((3, 9), 1 / 9, dtype=f64), atol=1e-15)
    probs = predict_tokens(rep, torch.zeros(9, 4, dtype=f64), "tanh")
    assert torch.allclose(probs, torch.full((3, 9), 1 / 9, dtype=f64), atol=1e-15)


def test_argmax_matches_exhaustive_scan():
    rng = np.random.default_rng(18)
    for _ in range(20):
        v = int(rng.integers(2, 500))
        rep, W_v = rand(rng, 4, 6), rand(rng, v, 6)
        probs = predict_tokens(rep, W_v)
        for j in range(4):
            logits = [float(F_gelu(sum(W_v[t, c] * rep[j, c] for c in range(6)))) for t in range(v)]
            best = max(range(v), key=lambda t: (logits[t], -t))
            assert int(torch.argmax(probs[j])) == best


def F_gelu(x):
    x = float(x)
    return 0.5 * x * (1 + math.erf(x / math.sqrt(2)))


def test_rows_sum_to_one_for_random_draws():
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        probs = predict_tokens(rand(rng, 3, 5), rand(rng, 11, 5) * 3, "gelu" if seed % 2 else "tanh")
        assert torch.allclose(probs.sum(-1), torch.ones(3, dtype=f64), atol=1e-6)


def test_decode_single_mask():
    itos = ["[PAD]", "morphine", "pain", "patients"]
    dist = torch.tensor([[0.1, 0.2, 0.6, 0.1], [0.0, 0.0, 0.9, 0.1]])
    assert decode_spans(dist, [(1, 1)], itos) == [["pain"]]


def test_decode_tie_goes_to_lowest_index():
    dist = torch.tensor([[0.1, 0.4, 0.4, 0.1]])
    assert decode_spans(dist, [(0, 0)], ["a", "b", "c", "d"]) == [["b"]]


def test_decode_four_masks_in_order():
    itos = ["x", "nausea", "vomiting", "drowsiness", "headache"]
    spans = [(4, 4), (6, 6), (8, 8), (10, 10)]
    dist = torch.zeros(13, 5)
    for (s, _), tok in zip(spans, (1, 2, 3, 4)):
        dist[s, tok] = 1.0
    assert decode_spans(dist, spans, itos) == [["nausea"], ["vomiting"], ["drowsiness"], ["headache"]]


def test_decode_ignores_unmasked_positions():
    rng = np.random.default_rng(19)
    dist = torch.softmax(rand(rng, 8, 10), -1)
    spans = [(2, 3), (6, 6)]
    before = decode_spans(dist, spans, [str(i) for i in range(10)])
    other = dist.clone()
    other[[0, 1, 4, 5, 7]] = torch.softmax(rand(rng, 5, 10), -1)
    assert decode_spans(other, spans, [str(i) for i in range(10)]) == before


# --- batched model path -----------------------------------------------------------


def test_batched_head_matches_functional_path(synthetic_prompts):
    model = tiny_model(synthetic_prompts).double().eval()
    prompts = synthetic_prompts[:8]
    batch = model.collate(prompts)
    with torch.no_grad():
        H = model.encode(batch)
        Hp, M, _ = model.head.representation(H, batch.type_ids, batch.pad_mask, batch.anchor_ids,
                                             batch.anchor_owner, "pbc")
        for b, p in enumerate(prompts):
            n = len(p.tokens)
            Hb = attach_query_type(H[b, :n], model.head.query_types[p.prompt_type.index])
            if p.mask_spans:
                seqs = [lookup_embeddings(model.head.positions, s) for s in all_mask_position_sequences(p)]
            else:
                seqs = [lookup_embeddings(model.head.positions, list(range(n)))]
            expected = mixed_representation(Hb, seqs, model.head)
            assert torch.allclose(M[b, :n], expected, atol=1e-12)


def test_no_blank_prompt_has_virtual_anchor_and_no_targets(synthetic_prompts):
    p = next(p for p in synthetic_prompts if p.prompt_type is PromptType.NO_BLANK)
    model = tiny_model(synthetic_prompts)
    batch = collate([p], model.vocab, 48)
    assert batch.anchor_ids.shape == (1, len(p.tokens))
    assert batch.anchor_ids[0].tolist() == list(range(len(p.tokens)))
    assert torch.all(batch.targets == -100)


def test_collate_strict_rejects_unknown_gold(synthetic_prompts):
    model = tiny_model(synthetic_prompts)
    p = PromptInstance(["w1", MASK], [(1, 1)], [("never-seen",)], PromptType.PREFIX, "x")
    with pytest.raises(ValueError, match="outside the vocabulary"):
        collate([p], model.vocab, 48, strict=True)


def test_prompt_from_text_types():
    assert prompt_from_text("After patients were given sorafenib, they reported [MASK]").prompt_type is PromptType.PREFIX
    assert prompt_from_text("[MASK] was assessed by questionnaires").prompt_type is PromptType.POSTFIX
    with pytest.raises(ValueError):
        prompt_from_text("no blanks here")


# --- checkpoints ----------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, synthetic_prompts):
    model = tiny_model(synthetic_prompts, layer_mode="mean_pool_all_layers").eval()
    path = tmp_path / "m.pt"
    save_checkpoint(path, model)
    loaded = load_checkpoint(path).eval()
    assert loaded.cfg == model.cfg
    batch = model.collate(synthetic_prompts[:5])
    with torch.no_grad():
        for mode in ("baseline", "pbc", "contextual_pbc"):
            assert torch.equal(model(batch, mode)["logits"], loaded(batch, mode)["logits"])


def test_checkpoint_bytes_are_reproducible(tmp_path, synthetic_prompts):
    model = tiny_model(synthetic_prompts)
    save_checkpoint(tmp_path / "a.pt", model)
    save_checkpoint(tmp_path / "b.pt", model)
    assert (tmp_path / "a.pt").read_bytes() == (tmp_path / "b.pt").read_bytes()


def test_checkpoint_vocab_mismatch(tmp_path, synthetic_prompts):
    model = tiny_model(synthetic_prompts)
    path = tmp_path / "m.pt"
    save_checkpoint(path, model)
    payload = torch.load(path, weights_only=True)
    payload["config"]["vocab_size"] += 1
    torch.save(payload, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.pt"
    torch.save({"format": "other"}, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_text("not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


# --- transformers adapter ----------------------------------------------------------


def test_hf_encoder_adapter(tmp_path):
    transformers = pytest.importorskip("transformers")
    config = transformers.BertConfig(vocab_size=40, hidden_size=16, num_hidden_layers=3, num_attention_heads=2,
                                     intermediate_size=32, max_position_embeddings=32)
    torch.manual_seed(0)
    encoder = HFEncoder(transformers.BertModel(config), "tiny-bert")
    vocab = Vocab(["[PAD]", "[UNK]", "[MASK]"] + [f"w{i}" for i in range(37)])
    p = PromptInstance(["w1", "w2", MASK, "w3"], [(2, 2)], [("w4",)], PromptType.CLOZE)
    from pbprompt.core import PbpModel

    model = PbpModel.create(encoder, vocab, d_t=2, k_a=4, k_p=3, n_max=32,
                            layer_mode="mean_pool_all_layers").eval()
    with torch.no_grad():
        ids = torch.tensor([vocab.encode(p.tokens)])
        layers = encoder(ids, torch.ones_like(ids, dtype=torch.bool))
        assert len(layers) == 3
        H = encode(p, encoder, vocab, "mean_pool_all_layers")
        assert torch.allclose(H, torch.stack([x[0] for x in layers]).mean(0), atol=1e-6)
        save_checkpoint(tmp_path / "hf.pt", model)
        loaded = load_checkpoint(tmp_path / "hf.pt").eval()
        batch = model.collate([p])
        assert torch.allclose(model(batch)["logits"], loaded(batch)["logits"], atol=1e-6)
    assert loaded.encoder.identifier == "hf:tiny-bert"
