"""Position-based conditioning (PBC) over encoder hidden states.

Shapes follow the batch-first convention: ``H`` is ``(..., n, k)``; after the
query-type embedding is prepended every token state has size
``k' = k + d_t`` and all attention / projection weights are sized for ``k'``.

The attention-weighted prompt representation is computed row-wise,
``M[j] = A[j] * H'[j]``, which keeps the ``n x k'`` shape. The ``"pooled"``
alternative (``A^T H'`` broadcast to every row) is available through
``pooling="pooled"`` for comparison.
"""

from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from pbprompt.corpus import MASK, PromptInstance, PromptType, classify_prompt_type
from pbprompt.encoders import Vocab, build_encoder
from pbprompt.position import PositionEmbeddingTable, anchor_sequences

LAYER_MODES = ("last_layer", "mean_pool_all_layers")
MODES = ("baseline", "pbc", "contextual_pbc")
ACTIVATIONS = {"gelu": F.gelu, "tanh": torch.tanh}
CHECKPOINT_FORMAT = "pbp-ckpt-v1"
N_TYPES = len(PromptType)


class CheckpointError(ValueError):
    pass


def _check_mode(mode: str) -> str:
    mode = mode.replace("-", "_")
    if mode not in MODES:
        raise ValueError(f"unknown prediction mode {mode!r}; expected one of {MODES}")
    return mode


def combine_layers(layers: Sequence[torch.Tensor], layer_mode: str = "last_layer") -> torch.Tensor:
    if layer_mode == "last_layer":
        return layers[-1]
    if layer_mode == "mean_pool_all_layers":
        return torch.stack(list(layers)).mean(0)
    raise ValueError(f"unknown layer mode {layer_mode!r}")


def attach_query_type(H: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Prepend the query-type vector(s) ``z`` to every row of ``H``.

    ``z`` is ``(d_t,)`` for a single prompt or ``(B, d_t)`` for a batch.
    """
    z = z.unsqueeze(-2).expand(*H.shape[:-1], z.shape[-1])
    return torch.cat([z, H], dim=-1)


def attention_logits(Hp: torch.Tensor, Ps: torch.Tensor, params) -> torch.Tensor:
    """``V^T tanh(W h'_j + U p_j)`` for every position ``j``."""
    return torch.tanh(Hp @ params.W.T + Ps @ params.U.T) @ params.V


def position_attention(Hp: torch.Tensor, Ps: torch.Tensor, params, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax over positions of the position-aware attention logits.

    ``mask`` (True = real token) excludes padding from the softmax.
    """
    logits = attention_logits(Hp, Ps, params)
    if not torch.isfinite(logits if mask is None else logits[mask.bool()]).all():
        raise FloatingPointError("non-finite attention logits (training diverged?)")
    if mask is not None:
        logits = logits.masked_fill(~mask.bool(), float("-inf"))
    return torch.softmax(logits, dim=-1)


def prompt_representation(A: torch.Tensor, Hp: torch.Tensor, pooling: str = "rowwise") -> torch.Tensor:
    if pooling == "rowwise":
        return A.unsqueeze(-1) * Hp
    if pooling == "pooled":
        return (A.unsqueeze(-1) * Hp).sum(-2, keepdim=True).expand_as(Hp)
    raise ValueError(f"unknown pooling {pooling!r}")


def mixed_representation(Hp: torch.Tensor, sequences: Sequence[torch.Tensor], params,
                         pooling: str = "rowwise", reduce: str = "mean") -> torch.Tensor:
    """Average (or sum) of single-anchor representations over all anchors.

    ``sequences`` holds one ``n x k_p`` position-embedding matrix per anchor.
    """
    if not len(sequences):
        raise ValueError("mixed_representation needs at least one position sequence")
    reps = [prompt_representation(position_attention(Hp, Ps, params), Hp, pooling) for Ps in sequences]
    total = torch.stack(reps).sum(0)
    return total / len(reps) if reduce == "mean" else total


def select_representation(mode: str, Hp: torch.Tensor, M: torch.Tensor | None) -> torch.Tensor:
    mode = _check_mode(mode)
    if mode == "baseline":
        return Hp
    if mode == "pbc":
        return M
    return (Hp + M) / 2


def token_logits(rep: torch.Tensor, W_v: torch.Tensor, activation: str = "gelu") -> torch.Tensor:
    return ACTIVATIONS[activation](rep @ W_v.T)


def predict_tokens(rep: torch.Tensor, W_v: torch.Tensor, activation: str = "gelu") -> torch.Tensor:
    """Per-position distribution over the vocabulary."""
    return torch.softmax(token_logits(rep, W_v, activation), dim=-1)


def decode_spans(distributions: torch.Tensor, mask_spans: Sequence[tuple[int, int]], vocab) -> list[list[str]]:
    """Fill every masked position with its argmax token, independently.

    Ties go to the lowest vocabulary index. ``vocab`` is a :class:`Vocab` or
    any ``id -> token`` sequence.
    """
    itos = vocab.itos if isinstance(vocab, Vocab) else vocab
    out = []
    for s, e in mask_spans:
        ids = [int(torch.argmax(distributions[j])) for j in range(s, e + 1)]
        out.append([itos[i] for i in ids])
    return out


def encode(prompt: PromptInstance, encoder: nn.Module, vocab: Vocab, layer_mode: str = "last_layer") -> torch.Tensor:
    """Hidden states ``n x k`` for one prompt (MASK sentinels become the mask id)."""
    if len(prompt.tokens) > encoder.max_length:
        raise ValueError(f"prompt {prompt.source_id!r} has {len(prompt.tokens)} tokens, "
                         f"more than the encoder maximum {encoder.max_length}")
    device = next(encoder.parameters()).device
    ids = torch.tensor([vocab.encode(prompt.tokens)], device=device)
    layers = encoder(ids, torch.ones_like(ids, dtype=torch.bool))
    return combine_layers(layers, layer_mode)[0]


# ---------------------------------------------------------------------------
# parameters and model


@dataclass
class PbpConfig:
    k: int
    vocab_size: int
    d_t: int = 50
    k_a: int = 200
    k_p: int = 300
    n_max: int = 128
    activation: str = "gelu"
    layer_mode: str = "last_layer"
    pooling: str = "rowwise"
    mixed_reduce: str = "mean"

    @property
    def k_prime(self) -> int:
        return self.k + self.d_t


class PbpHead(nn.Module):
    """Trainable parameters added on top of the encoder."""

    def __init__(self, cfg: PbpConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        kp = cfg.k_prime
        g = generator
        self.W = nn.Parameter(torch.randn(cfg.k_a, kp, generator=g) / math.sqrt(kp))
        self.U = nn.Parameter(torch.randn(cfg.k_a, cfg.k_p, generator=g) / math.sqrt(cfg.k_p))
        self.V = nn.Parameter(torch.randn(cfg.k_a, generator=g) / math.sqrt(cfg.k_a))
        self.positions = PositionEmbeddingTable(cfg.n_max, cfg.k_p, generator=g)
        self.query_types = nn.Parameter(torch.empty(N_TYPES, cfg.d_t).uniform_(-0.05, 0.05, generator=g))
        self.W_v = nn.Parameter(torch.randn(cfg.vocab_size, kp, generator=g) * 0.02)
        self.classifier = nn.Linear(kp, N_TYPES)

    def representation(self, H, type_ids, pad_mask, anchor_ids, anchor_owner, mode):
        """Return ``(H', M, attention)``; ``M`` and ``attention`` are None in baseline mode.

        ``anchor_ids`` holds one padded position-id row per anchor and
        ``anchor_owner`` the batch row each anchor belongs to.
        """
        Hp = attach_query_type(H, self.query_types[type_ids])
        if _check_mode(mode) == "baseline":
            return Hp, None, None
        Hr = Hp[anchor_owner]
        A = position_attention(Hr, self.positions(anchor_ids), self, mask=pad_mask[anchor_owner])
        Mr = prompt_representation(A, Hr, self.cfg.pooling)
        M = torch.zeros_like(Hp).index_add(0, anchor_owner, Mr)
        if self.cfg.mixed_reduce == "mean":
            counts = torch.bincount(anchor_owner, minlength=Hp.shape[0]).clamp(min=1).to(Hp.dtype)
            M = M / counts[:, None, None]
        return Hp, M, A

    def forward(self, H, type_ids, pad_mask, anchor_ids, anchor_owner, mode="pbc") -> dict:
        Hp, M, A = self.representation(H, type_ids, pad_mask, anchor_ids, anchor_owner, mode)
        rep = select_representation(mode, Hp, M)
        valid = pad_mask.to(rep.dtype).unsqueeze(-1)
        pooled = (rep * valid).sum(1) / valid.sum(1).clamp(min=1)
        return {
            "logits": token_logits(rep, self.W_v, self.cfg.activation),
            "class_logits": self.classifier(pooled),
            "attention": A,
            "rep": rep,
        }


@dataclass
class Batch:
    input_ids: torch.Tensor  # (B, n)
    pad_mask: torch.Tensor  # (B, n) True for real tokens
    type_ids: torch.Tensor  # (B,)
    anchor_ids: torch.Tensor  # (R, n)
    anchor_owner: torch.Tensor  # (R,)
    targets: torch.Tensor  # (B, n) gold ids at masked positions, -100 elsewhere
    prompts: list = field(default_factory=list)

    def to(self, device) -> "Batch":
        return Batch(*(getattr(self, f).to(device) for f in
                       ("input_ids", "pad_mask", "type_ids", "anchor_ids", "anchor_owner", "targets")),
                     prompts=self.prompts)


def collate(prompts: Sequence[PromptInstance], vocab: Vocab, n_max: int, strict: bool = False) -> Batch:
    """Tensorise prompts. ``strict`` rejects gold tokens outside ``vocab``."""
    n = max(len(p.tokens) for p in prompts)
    for p in prompts:
        if len(p.tokens) > n_max:
            raise ValueError(f"prompt {p.source_id!r} has {len(p.tokens)} tokens, more than n_max={n_max}")
    B = len(prompts)
    input_ids = torch.full((B, n), vocab.pad_id, dtype=torch.long)
    pad_mask = torch.zeros(B, n, dtype=torch.bool)
    targets = torch.full((B, n), -100, dtype=torch.long)
    anchors, owners = [], []
    for b, p in enumerate(prompts):
        m = len(p.tokens)
        input_ids[b, :m] = torch.tensor(vocab.encode(p.tokens))
        pad_mask[b, :m] = True
        for (s, e), gold in zip(p.mask_spans, p.gold_answers):
            if strict and any(t not in vocab for t in gold):
                raise ValueError(f"prompt {p.source_id!r}: gold tokens {gold!r} outside the vocabulary")
            targets[b, s : e + 1] = torch.tensor(vocab.encode(gold))
        for seq in anchor_sequences(p):
            ids = list(seq.ids)
            last = ids[-1]
            # padding continues the id ramp so it stays inside the table range
            anchors.append(ids + [min(last + i, n_max - 1) for i in range(1, n - m + 1)])
            owners.append(b)
    return Batch(
        input_ids, pad_mask,
        torch.tensor([p.prompt_type.index for p in prompts], dtype=torch.long),
        torch.tensor(anchors, dtype=torch.long), torch.tensor(owners, dtype=torch.long),
        targets, list(prompts),
    )


class PbpModel(nn.Module):
    """Encoder + PBC head + vocabulary."""

    def __init__(self, encoder: nn.Module, vocab: Vocab, cfg: PbpConfig, generator: torch.Generator | None = None):
        super().__init__()
        if cfg.vocab_size != len(vocab) or cfg.vocab_size != encoder.vocab_size:
            raise CheckpointError(
                f"vocabulary size mismatch: config {cfg.vocab_size}, vocab {len(vocab)}, encoder {encoder.vocab_size}"
            )
        if cfg.k != encoder.hidden_size:
            raise CheckpointError(f"hidden size mismatch: config {cfg.k}, encoder {encoder.hidden_size}")
        self.encoder = encoder
        self.vocab = vocab
        self.cfg = cfg
        self.head = PbpHead(cfg, generator)

    @classmethod
    def create(cls, encoder: nn.Module, vocab: Vocab, generator: torch.Generator | None = None, **overrides):
        cfg = PbpConfig(k=encoder.hidden_size, vocab_size=len(vocab), **overrides)
        cfg.n_max = min(cfg.n_max, encoder.max_length)
        return cls(encoder, vocab, cfg, generator)

    def encode(self, batch: Batch) -> torch.Tensor:
        layers = self.encoder(batch.input_ids, batch.pad_mask)
        return combine_layers(layers, self.cfg.layer_mode)

    def forward(self, batch: Batch, mode: str = "pbc") -> dict:
        H = self.encode(batch)
        return self.head(H, batch.type_ids, batch.pad_mask, batch.anchor_ids, batch.anchor_owner, mode)

    def collate(self, prompts, strict=False) -> Batch:
        device = next(self.parameters()).device
        return collate(prompts, self.vocab, self.cfg.n_max, strict).to(device)

    @torch.no_grad()
    def predict(self, prompts: Sequence[PromptInstance], mode: str = "contextual_pbc",
                batch_size: int = 8, topk: int = 0) -> list[dict]:
        """Decode every prompt. Each result has ``spans`` (predicted tokens per
        mask span), and optionally ``topk`` and ``attention`` diagnostics."""
        was_training = self.training
        self.eval()
        results = []
        for i in range(0, len(prompts), batch_size):
            chunk = list(prompts[i : i + batch_size])
            batch = self.collate(chunk)
            out = self(batch, mode)
            probs = torch.softmax(out["logits"], dim=-1)
            anchor_rows = batch.anchor_owner.tolist()
            for b, p in enumerate(chunk):
                res = {"spans": decode_spans(probs[b], p.mask_spans, self.vocab)}
                if topk:
                    vals, idx = probs[b].topk(min(topk, probs.shape[-1]), dim=-1)
                    res["topk"] = [
                        [(self.vocab.itos[int(t)], float(v)) for t, v in zip(idx[j], vals[j])]
                        for j in p.masked_positions
                    ]
                if out["attention"] is not None:
                    rows = [r for r, o in enumerate(anchor_rows) if o == b]
                    A = out["attention"][rows][:, : len(p.tokens)]
                    res["attention"] = A.cpu().tolist()
                results.append(res)
        self.train(was_training)
        return results


def prompt_from_text(text: str) -> PromptInstance:
    """Build a probe prompt from raw text containing ``[MASK]`` sentinels."""
    import re

    tokens = re.findall(r"\[MASK\]|\w+(?:[-']\w+)*|[^\w\s]", text)
    spans: list[tuple[int, int]] = []
    for j, t in enumerate(tokens):
        if t == MASK:
            if spans and spans[-1][1] == j - 1:
                spans[-1] = (spans[-1][0], j)
            else:
                spans.append((j, j))
    if not spans:
        raise ValueError("prompt text contains no [MASK] sentinel")
    gold = [(MASK,) * (e - s + 1) for s, e in spans]
    return PromptInstance(tokens, spans, gold, classify_prompt_type(spans, len(tokens), tokens), "probe")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: PbpModel, extra: dict | None = None) -> None:
    """Write encoder weights, head arrays and configuration to one archive."""
    head_state = {k: v.detach().cpu().contiguous() for k, v in model.head.state_dict().items()}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.cfg),
        "encoder": {
            "spec": model.encoder.spec(),
            "state_dict": {k: v.detach().cpu().contiguous() for k, v in model.encoder.state_dict().items()},
        },
        "pbp": head_state,
        "shapes": {k: list(v.shape) for k, v in head_state.items()},
        "vocab": model.vocab.to_list(),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> PbpModel:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types here
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    cfg = PbpConfig(**payload["config"])
    for name, shape in payload["shapes"].items():
        if list(payload["pbp"][name].shape) != shape:
            raise CheckpointError(f"array {name} has shape {list(payload['pbp'][name].shape)}, expected {shape}")
    if payload["shapes"]["W_v"][0] != cfg.vocab_size:
        raise CheckpointError(f"W_v rows {payload['shapes']['W_v'][0]} != vocabulary size {cfg.vocab_size}")
    encoder = build_encoder(payload["encoder"]["spec"])
    encoder.load_state_dict(payload["encoder"]["state_dict"])
    model = PbpModel(encoder, Vocab.from_list(payload["vocab"]), cfg)
    model.head.load_state_dict(payload["pbp"])
    model.extra = payload.get("extra", {})
    return model
