"""Mask-relative position ids and the trainable position-embedding table."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn


@dataclass(frozen=True)
class PositionIdSequence:
    ids: tuple[int, ...]
    anchor_span_index: int

    def __len__(self):
        return len(self.ids)


def mask_relative_ids(n: int, mask_spans: Sequence[tuple[int, int]], anchor_span_index: int) -> PositionIdSequence:
    """Position ids relative to one anchor span ``[a, b]``.

    Tokens before the anchor get ``j - a``, tokens inside it get 0 and tokens
    after it get ``j - b``. Other mask spans are ordinary tokens here.
    """
    if not 0 <= anchor_span_index < len(mask_spans):
        raise IndexError(f"anchor span index {anchor_span_index} invalid for {len(mask_spans)} spans")
    for s, e in mask_spans:
        if not 0 <= s <= e < n:
            raise ValueError(f"span ({s}, {e}) out of bounds for length {n}")
    a, b = mask_spans[anchor_span_index]
    ids = tuple(j - a if j < a else (j - b if j > b else 0) for j in range(n))
    return PositionIdSequence(ids, anchor_span_index)


def all_mask_position_sequences(prompt) -> list[PositionIdSequence]:
    """One id sequence per mask span of ``prompt``, in span order."""
    if not prompt.mask_spans:
        raise ValueError(f"prompt {prompt.source_id!r} has no mask spans")
    n = len(prompt.tokens)
    return [mask_relative_ids(n, prompt.mask_spans, i) for i in range(len(prompt.mask_spans))]


def anchor_sequences(prompt) -> list[PositionIdSequence]:
    """Like :func:`all_mask_position_sequences`, but a prompt without masks
    gets a single virtual anchor at position 0."""
    if prompt.mask_spans:
        return all_mask_position_sequences(prompt)
    return [mask_relative_ids(len(prompt.tokens), [(0, 0)], 0)]


class PositionEmbeddingTable(nn.Module):
    """``2 * n_max`` trainable rows of size ``k_p``; id ``p`` lives in row ``p + n_max``."""

    def __init__(self, n_max: int, k_p: int, init_range: float = 0.05, generator: torch.Generator | None = None):
        super().__init__()
        self.n_max = n_max
        self.k_p = k_p
        weight = torch.empty(2 * n_max, k_p)
        weight.uniform_(-init_range, init_range, generator=generator)
        self.weight = nn.Parameter(weight)

    def rows(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.numel() and (int(ids.min()) < -self.n_max or int(ids.max()) > self.n_max - 1):
            raise ValueError(
                f"position id outside [-{self.n_max}, {self.n_max - 1}]: sequence longer than n_max={self.n_max}"
            )
        return ids + self.n_max

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.weight[self.rows(ids)]


def lookup_embeddings(table: PositionEmbeddingTable, seq: PositionIdSequence | Sequence[int]) -> torch.Tensor:
    """Return the ``n x k_p`` matrix of position embeddings for ``seq``."""
    ids = seq.ids if isinstance(seq, PositionIdSequence) else seq
    return table(torch.as_tensor(ids, dtype=torch.long, device=table.weight.device))
