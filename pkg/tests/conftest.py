import numpy as np
import pytest
import torch

from pbprompt.core import PbpModel
from pbprompt.corpus import generate_synthetic_corpus, mask_corpus
from pbprompt.encoders import ToyEncoder, Vocab


class Params:
    """Bare parameter holder for the functional attention ops."""

    def __init__(self, W, U, V):
        self.W, self.U, self.V = W, U, V


def random_params(rng: np.random.Generator, k_a, kp, k_p, scale=1.0):
    t = lambda *s: torch.tensor(rng.normal(scale=scale, size=s), dtype=torch.float64)
    return Params(t(k_a, kp), t(k_a, k_p), t(k_a))


def tiny_model(prompts, seed=0, **overrides) -> PbpModel:
    torch.manual_seed(seed)
    vocab = Vocab.from_prompts(prompts)
    encoder = ToyEncoder(len(vocab), hidden_size=16, num_layers=2, num_heads=2, ff_size=32, max_length=48)
    cfg = dict(d_t=4, k_a=8, k_p=6, n_max=48)
    cfg.update(overrides)
    return PbpModel.create(encoder, vocab, generator=torch.Generator().manual_seed(seed), **cfg)


@pytest.fixture
def synthetic_prompts():
    return mask_corpus(generate_synthetic_corpus(11, 30, 60))
