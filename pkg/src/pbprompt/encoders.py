"""Masked-LM encoders and the word-level vocabulary that feeds them.

Every encoder maps ``(input_ids, attention_mask)`` to the list of per-layer
hidden states (transformer layers only, the embedding output is excluded).
"""

from __future__ import annotations

import os
from typing import Iterable, Sequence

import torch
from torch import nn

from pbprompt.corpus import MASK

PAD = "[PAD]"
UNK = "[UNK]"


class Vocab:
    def __init__(self, tokens: Sequence[str], pad_token: str = PAD, unk_token: str = UNK, mask_token: str = MASK):
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")
        for t in (pad_token, unk_token, mask_token):
            if t not in self.stoi:
                raise ValueError(f"special token {t!r} missing from vocabulary")
        self.pad_token, self.unk_token, self.mask_token = pad_token, unk_token, mask_token
        self.pad_id = self.stoi[pad_token]
        self.unk_id = self.stoi[unk_token]
        self.mask_id = self.stoi[mask_token]

    @classmethod
    def build(cls, token_lists: Iterable[Sequence[str]]) -> "Vocab":
        """Specials first, then tokens in sorted order (deterministic)."""
        words = {t for toks in token_lists for t in toks} - {PAD, UNK, MASK}
        return cls([PAD, UNK, MASK] + sorted(words))

    @classmethod
    def from_prompts(cls, prompts) -> "Vocab":
        return cls.build([t for t in p.tokens] + [t for a in p.gold_answers for t in a] for p in prompts)

    @classmethod
    def from_hf_tokenizer(cls, tokenizer) -> "Vocab":
        """Whole-word view of a pretrained tokenizer's vocabulary.

        Words missing from the tokenizer vocabulary map to its unknown token;
        sub-word splitting is not performed.
        """
        vocab = tokenizer.get_vocab()
        itos = [None] * (max(vocab.values()) + 1)
        for tok, i in vocab.items():
            itos[i] = tok
        itos = [t if t is not None else f"[unused-{i}]" for i, t in enumerate(itos)]
        v = cls(itos, tokenizer.pad_token, tokenizer.unk_token, tokenizer.mask_token)
        # prompts always carry our own sentinel
        v.stoi[MASK] = v.mask_id
        return v

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.mask_id if t == MASK else self.stoi.get(t, self.unk_id) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[int(i)] for i in ids]

    def to_list(self) -> dict:
        return {"tokens": self.itos, "pad": self.pad_token, "unk": self.unk_token, "mask": self.mask_token}

    @classmethod
    def from_list(cls, d: dict) -> "Vocab":
        return cls(d["tokens"], d["pad"], d["unk"], d["mask"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


class ToyEncoder(nn.Module):
    """Small pre-norm transformer encoder used for desk-scale runs."""

    kind = "toy"

    def __init__(self, vocab_size: int, hidden_size: int = 64, num_layers: int = 2, num_heads: int = 4,
                 ff_size: int = 256, max_length: int = 128, dropout: float = 0.0):
        super().__init__()
        self.config = dict(vocab_size=vocab_size, hidden_size=hidden_size, num_layers=num_layers,
                           num_heads=num_heads, ff_size=ff_size, max_length=max_length, dropout=dropout)
        self.vocab_size = vocab_size
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.max_length = max_length
        self.tok_emb = nn.Embedding(vocab_size, hidden_size)
        self.pos_emb = nn.Embedding(max_length, hidden_size)
        self.emb_norm = nn.LayerNorm(hidden_size)
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(hidden_size, num_heads, ff_size, dropout=dropout, activation="gelu",
                                       batch_first=True, norm_first=True)
            for _ in range(num_layers)
        )
        self.final_norm = nn.LayerNorm(hidden_size)
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb.weight, std=0.02)

    @property
    def identifier(self) -> str:
        return "toy"

    def spec(self) -> dict:
        return {"kind": self.kind, "identifier": self.identifier, "config": dict(self.config)}

    def forward(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> list[torch.Tensor]:
        n = input_ids.shape[1]
        if n > self.max_length:
            raise ValueError(f"sequence length {n} exceeds encoder max length {self.max_length}")
        pos = torch.arange(n, device=input_ids.device)
        x = self.emb_norm(self.tok_emb(input_ids) + self.pos_emb(pos))
        pad = ~attention_mask.bool()
        states = []
        for i, layer in enumerate(self.layers):
            x = layer(x, src_key_padding_mask=pad)
            # pre-norm stack: normalise the reported state of every layer the same way
            states.append(self.final_norm(x) if i == len(self.layers) - 1 else x)
        return states


class HFEncoder(nn.Module):
    """Adapter around a ``transformers`` encoder (``AutoModel``-style)."""

    kind = "hf"

    def __init__(self, model, name: str = ""):
        super().__init__()
        self.model = model
        self.name = name or getattr(model.config, "_name_or_path", "") or model.config.model_type
        self.vocab_size = model.config.vocab_size
        self.hidden_size = model.config.hidden_size
        self.num_layers = model.config.num_hidden_layers
        self.max_length = getattr(model.config, "max_position_embeddings", 512)

    @classmethod
    def from_pretrained(cls, name: str, cache_dir: str | None = None) -> "HFEncoder":
        from transformers import AutoModel

        cache_dir = cache_dir or os.environ.get("PBP_CACHE_DIR")
        return cls(AutoModel.from_pretrained(name, cache_dir=cache_dir), name)

    @property
    def identifier(self) -> str:
        return f"hf:{self.name}"

    def spec(self) -> dict:
        return {"kind": self.kind, "identifier": self.identifier, "config": self.model.config.to_dict()}

    def forward(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> list[torch.Tensor]:
        if input_ids.shape[1] > self.max_length:
            raise ValueError(f"sequence length {input_ids.shape[1]} exceeds encoder max length {self.max_length}")
        out = self.model(input_ids=input_ids, attention_mask=attention_mask.long(), output_hidden_states=True)
        return list(out.hidden_states[1:])


def build_encoder(spec: dict) -> nn.Module:
    """Rebuild an (untrained) encoder from the record produced by ``spec()``."""
    if spec["kind"] == "toy":
        return ToyEncoder(**spec["config"])
    if spec["kind"] == "hf":
        from transformers import AutoConfig, AutoModel

        cfg = dict(spec["config"])
        config = AutoConfig.for_model(cfg.pop("model_type"), **cfg)
        return HFEncoder(AutoModel.from_config(config), spec["identifier"].removeprefix("hf:"))
    raise ValueError(f"unknown encoder kind {spec['kind']!r}")
