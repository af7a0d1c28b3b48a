"""Fine-tuning under the masked-prediction + prompt-type classification loss."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from pbprompt.core import PbpModel
from pbprompt.corpus import AnnotatedSentence, PromptInstance, mask_corpus
from pbprompt.encoders import ToyEncoder, Vocab
from pbprompt.evaluation import exact_match, partial_match, span_predictions

logger = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    learning_rate: float = 5e-5
    train_batch_size: int = 16
    eval_batch_size: int = 8
    lambda_aux: float = 0.1
    max_epochs: int = 100
    target_perplexity: float = 1.0
    epsilon: float = 0.05
    patience: int = 5
    min_improvement: float = 0.1  # EM points
    seed: int = 0
    optimizer: str = "adam"
    d_t: int = 50
    k_p: int = 300
    k_a: int = 200
    n_max: int = 128
    activation: str = "gelu"
    layer_mode: str = "last_layer"
    pooling: str = "rowwise"
    mixed_reduce: str = "mean"
    train_mode: str = "pbc"
    # "random" re-draws the masked positions of every sentence each epoch
    masking: str = "custom"
    mask_rate: float = 0.15
    freeze_encoder: bool = False
    # toy encoder, used when no encoder is passed to train()
    toy_layers: int = 2
    toy_hidden: int = 64
    toy_heads: int = 4
    toy_ff: int = 256

    def __post_init__(self):
        if self.lambda_aux < 0:
            raise ValueError("lambda_aux must be >= 0")
        if self.train_batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.masking not in ("custom", "random"):
            raise ValueError("masking must be 'custom' or 'random'")

    def head_overrides(self) -> dict:
        return dict(d_t=self.d_t, k_a=self.k_a, k_p=self.k_p, n_max=self.n_max, activation=self.activation,
                    layer_mode=self.layer_mode, pooling=self.pooling, mixed_reduce=self.mixed_reduce)

    def replace(self, **changes) -> "TrainingConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def coerce(cls, name: str, raw: str):
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        if name not in types:
            raise KeyError(f"unknown config key {name!r}")
        t = types[name]
        if t == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return {"int": int, "float": float}.get(t, str)(raw)

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "TrainingConfig":
        """Read ``key = value`` lines (``#`` comments allowed); overrides win."""
        values = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, raw = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            values[key] = cls.coerce(key, raw)
        values.update(overrides)
        return cls(**values)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_perplexity: float
    val_em: float | None = None
    val_pm: float | None = None
    seconds: float = 0.0


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    stop_reason: str = ""

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        self.records.append(rec)

    @property
    def losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    @property
    def perplexities(self) -> list[float]:
        return [r.train_perplexity for r in self.records]

    def epochs_to_perplexity(self, target: float) -> int | None:
        return next((r.epoch for r in self.records if r.train_perplexity <= target), None)

    def to_tsv(self) -> str:
        def cell(x):
            return "" if x is None else f"{x:.6f}"

        # wall-clock time lives only in the header so reruns differ in one line
        lines = [f"# seconds={sum(r.seconds for r in self.records):.3f} stop={self.stop_reason}",
                 "epoch\tloss\tperplexity\tval_em\tval_pm"]
        for r in self.records:
            lines.append(f"{r.epoch}\t{r.train_loss:.6f}\t{r.train_perplexity:.6f}\t{cell(r.val_em)}"
                         f"\t{cell(r.val_pm)}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; carries the last good model and the log."""

    def __init__(self, message: str, model: PbpModel, log: TrainLog):
        super().__init__(message)
        self.model = model
        self.log = log


def mlm_loss(log_probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Summed NLL of the gold token at masked positions (``targets != -100``).

    ``log_probs`` holds per-position log-distributions; pass ``probs.log()``
    when starting from probabilities.
    """
    return F.nll_loss(log_probs.reshape(-1, log_probs.shape[-1]), targets.reshape(-1),
                      ignore_index=-100, reduction="sum")


def aux_classification_loss(class_logits: torch.Tensor, type_ids: torch.Tensor) -> torch.Tensor:
    """Summed cross-entropy of the 5-way prompt-type classifier."""
    return F.cross_entropy(class_logits, type_ids, reduction="sum")


def total_loss(l_plm, l_tc, lambda_aux: float):
    return l_plm + lambda_aux * l_tc


def perplexity(mean_nll: float) -> float:
    return math.exp(mean_nll)


def batch_losses(model: PbpModel, batch, mode: str, lambda_aux: float):
    out = model(batch, mode)
    log_probs = F.log_softmax(out["logits"], dim=-1)
    l_plm = mlm_loss(log_probs, batch.targets)
    l_tc = aux_classification_loss(out["class_logits"], batch.type_ids)
    return total_loss(l_plm, l_tc, lambda_aux), l_plm, l_tc, int((batch.targets != -100).sum())


@torch.no_grad()
def corpus_loss(model: PbpModel, prompts: Sequence[PromptInstance], config: TrainingConfig) -> tuple[float, float]:
    """(total loss, perplexity) of ``prompts`` under the current parameters."""
    was_training = model.training
    model.eval()
    loss = nll = 0.0
    count = 0
    for i in range(0, len(prompts), config.eval_batch_size):
        batch = model.collate(prompts[i : i + config.eval_batch_size])
        total, l_plm, _, n = batch_losses(model, batch, config.train_mode, config.lambda_aux)
        loss += float(total)
        nll += float(l_plm)
        count += n
    model.train(was_training)
    return loss, perplexity(nll / count if count else 0.0)


def evaluate_em_pm(model: PbpModel, prompts: Sequence[PromptInstance], mode: str,
                   batch_size: int = 8) -> tuple[float, float]:
    prompts = [p for p in prompts if p.mask_spans]
    results = model.predict(prompts, mode, batch_size)
    preds = span_predictions(prompts, [r["spans"] for r in results])
    return exact_match(preds), partial_match(preds)


def build_model(corpus: Sequence[PromptInstance], config: TrainingConfig, encoder=None,
                vocab: Vocab | None = None) -> PbpModel:
    torch.manual_seed(config.seed)
    vocab = vocab or Vocab.from_prompts(corpus)
    if encoder is None:
        encoder = ToyEncoder(len(vocab), config.toy_hidden, config.toy_layers, config.toy_heads,
                             config.toy_ff, max_length=config.n_max)
    gen = torch.Generator().manual_seed(config.seed)
    return PbpModel.create(encoder, vocab, generator=gen, **config.head_overrides())


def remasked(corpus: Sequence[PromptInstance], config: TrainingConfig, epoch: int) -> list[PromptInstance]:
    """Fresh random masks over the unmasked sentences of ``corpus`` for ``epoch``."""
    sentences = [AnnotatedSentence(p.unmask(), (), p.source_id) for p in corpus]
    seed = int(np.random.SeedSequence([config.seed, epoch]).generate_state(1)[0])
    return mask_corpus(sentences, "random", config.mask_rate, seed)


def train(corpus: Sequence[PromptInstance], config: TrainingConfig, encoder=None,
          validation: Sequence[PromptInstance] | None = None, vocab: Vocab | None = None,
          on_epoch=None) -> tuple[PbpModel, TrainLog]:
    """Fine-tune encoder and PBC head on ``corpus``.

    Stops when train perplexity reaches ``target_perplexity + epsilon``, when
    validation EM has not improved by ``min_improvement`` for ``patience``
    epochs, or after ``max_epochs``. With ``config.masking == "random"`` the
    masked positions are re-drawn every epoch (the vocabulary still covers
    the full sentences). With a validation set the returned model
    is the one with the best validation EM, otherwise the final one.
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    torch.use_deterministic_algorithms(True, warn_only=True)
    corpus = list(corpus)
    model = build_model(corpus, config, encoder, vocab)
    if config.freeze_encoder:
        model.encoder.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    if config.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=config.learning_rate)
    else:
        opt = torch.optim.SGD(params, lr=config.learning_rate)
    # validate eagerly so an out-of-vocabulary gold token fails before any step
    model.collate(list(corpus), strict=True)

    log = TrainLog()
    order_rng = np.random.default_rng(config.seed)
    best_em, best_state, stale = -math.inf, None, 0
    last_good = copy.deepcopy(model.state_dict())
    threshold = config.target_perplexity + config.epsilon
    model.train()
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = order_rng.permutation(len(corpus))
        epoch_corpus = remasked(corpus, config, epoch) if config.masking == "random" else corpus
        epoch_loss = epoch_nll = 0.0
        n_masked = 0
        for i in range(0, len(order), config.train_batch_size):
            batch = model.collate([epoch_corpus[j] for j in order[i : i + config.train_batch_size]])
            try:
                loss, l_plm, _, n = batch_losses(model, batch, config.train_mode, config.lambda_aux)
            except FloatingPointError as exc:
                loss, l_plm, n = torch.tensor(float("nan")), None, 0
                logger.error("epoch %d: %s", epoch, exc)
            if not torch.isfinite(loss):
                model.load_state_dict(last_good)
                log.stop_reason = "non-finite loss"
                raise TrainingAborted(f"non-finite loss at epoch {epoch}", model, log)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            epoch_nll += float(l_plm.detach())
            n_masked += n
        ppl = perplexity(epoch_nll / n_masked if n_masked else 0.0)
        rec = EpochRecord(epoch, epoch_loss, ppl)
        if validation:
            rec.val_em, rec.val_pm = evaluate_em_pm(model, validation, config.train_mode, config.eval_batch_size)
        rec.seconds = time.perf_counter() - t0
        log.append(rec)
        last_good = copy.deepcopy(model.state_dict())
        logger.info("epoch %d loss %.4f ppl %.4f val_em %s", epoch, rec.train_loss, ppl, rec.val_em)
        if on_epoch is not None:
            on_epoch(rec)

        if validation:
            if rec.val_em > best_em + config.min_improvement or best_state is None:
                best_em, best_state, stale = rec.val_em, copy.deepcopy(model.state_dict()), 0
            else:
                stale += 1
        if ppl <= threshold:
            log.stop_reason = f"train perplexity {ppl:.4f} <= {threshold:g}"
            break
        if validation and stale >= config.patience:
            log.stop_reason = f"validation EM saturated for {config.patience} epochs"
            break
    else:
        log.stop_reason = "max_epochs" if config.max_epochs else "max_epochs=0"

    if best_state is not None:
        model.load_state_dict(best_state)
    return model, log
