"""Annotated sentences, masking, prompt-type classification and data splits.

Two annotation formats are accepted by :func:`parse_annotations`:

* token-per-line BIO text (``token<TAB>tag``, blank line between sentences,
  tags ``O`` / ``B-Outcome`` / ``I-Outcome``);
* line-delimited JSON records ``{"tokens": [...], "spans": [[s, e, label], ...]}``
  with inclusive span ends and an optional ``"id"``.
"""

from __future__ import annotations

import enum
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MASK = "[MASK]"
TERMINAL_PUNCTUATION = frozenset({".", "?", "!"})


class PromptType(str, enum.Enum):
    PREFIX = "prefix"
    CLOZE = "cloze"
    POSTFIX = "postfix"
    MIXED = "mixed"
    NO_BLANK = "no_blank"

    @property
    def index(self) -> int:
        return _TYPE_ORDER.index(self)


_TYPE_ORDER = list(PromptType)
MASKED_TYPES = (PromptType.PREFIX, PromptType.CLOZE, PromptType.POSTFIX, PromptType.MIXED)


class Span(NamedTuple):
    start: int
    end: int  # inclusive
    label: str = "Outcome"


class AnnotationError(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(Decimal(repr(float(x))).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def _check_spans(spans: Sequence[tuple[int, int]], n: int) -> None:
    prev_end = -1
    for s, e, *_ in spans:
        if not (0 <= s <= e < n):
            raise AnnotationError(f"span ({s}, {e}) out of bounds for length {n}")
        if s <= prev_end:
            raise AnnotationError(f"span ({s}, {e}) overlaps or is out of order")
        prev_end = e


@dataclass(frozen=True)
class AnnotatedSentence:
    tokens: tuple[str, ...]
    outcome_spans: tuple[Span, ...] = ()
    source_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "outcome_spans", tuple(Span(*s) for s in self.outcome_spans))
        _check_spans(self.outcome_spans, len(self.tokens))

    def to_record(self) -> dict:
        return {
            "id": self.source_id,
            "tokens": list(self.tokens),
            "spans": [[s.start, s.end, s.label] for s in self.outcome_spans],
        }


@dataclass(frozen=True)
class PromptInstance:
    tokens: tuple[str, ...]
    mask_spans: tuple[tuple[int, int], ...]
    gold_answers: tuple[tuple[str, ...], ...]
    prompt_type: PromptType
    source_id: str = ""
    # train-set frequency of each gold answer; set by build_generalisation_testset
    answer_frequencies: tuple[int, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "mask_spans", tuple((int(s), int(e)) for s, e in self.mask_spans))
        object.__setattr__(self, "gold_answers", tuple(tuple(a) for a in self.gold_answers))
        object.__setattr__(self, "prompt_type", PromptType(self.prompt_type))
        if self.answer_frequencies is not None:
            object.__setattr__(self, "answer_frequencies", tuple(int(f) for f in self.answer_frequencies))
            if len(self.answer_frequencies) != len(self.mask_spans):
                raise ValueError("answer_frequencies must align with mask_spans")
        if len(self.gold_answers) != len(self.mask_spans):
            raise ValueError("gold_answers must align 1:1 with mask_spans")
        _check_spans(self.mask_spans, len(self.tokens))
        for (s, e), gold in zip(self.mask_spans, self.gold_answers):
            if len(gold) != e - s + 1:
                raise ValueError(f"gold answer {gold!r} does not cover span ({s}, {e})")
            if any(t != MASK for t in self.tokens[s : e + 1]):
                raise ValueError(f"span ({s}, {e}) is not fully masked")
        expected = classify_prompt_type(self.mask_spans, len(self.tokens), self.tokens)
        if expected is not self.prompt_type:
            raise ValueError(f"prompt_type {self.prompt_type.value} inconsistent with spans ({expected.value})")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def masked_positions(self) -> list[int]:
        return [j for s, e in self.mask_spans for j in range(s, e + 1)]

    def unmask(self) -> tuple[str, ...]:
        """Reconstruct the original token sequence from the gold answers."""
        out = list(self.tokens)
        for (s, e), gold in zip(self.mask_spans, self.gold_answers):
            out[s : e + 1] = gold
        return tuple(out)

    def context_tokens(self) -> list[str]:
        return [t for t in self.tokens if t != MASK]

    def to_record(self) -> dict:
        rec = {
            "id": self.source_id,
            "tokens": list(self.tokens),
            "mask_spans": [list(s) for s in self.mask_spans],
            "gold_answers": [list(a) for a in self.gold_answers],
            "prompt_type": self.prompt_type.value,
        }
        if self.answer_frequencies is not None:
            rec["answer_frequencies"] = list(self.answer_frequencies)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "PromptInstance":
        return cls(
            tokens=rec["tokens"],
            mask_spans=rec.get("mask_spans", []),
            gold_answers=rec.get("gold_answers", []),
            prompt_type=rec["prompt_type"],
            source_id=rec.get("id", ""),
            answer_frequencies=rec.get("answer_frequencies"),
        )


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    context_overlap_threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.train_fraction <= 1.0:
            raise ValueError("train_fraction must lie in [0, 1]")
        if not 0.0 <= self.context_overlap_threshold <= 1.0:
            raise ValueError("context_overlap_threshold must lie in [0, 1]")


# ---------------------------------------------------------------------------
# parsing


def _parse_bio(text: str) -> list[AnnotatedSentence]:
    sentences = []
    tokens: list[str] = []
    tags: list[str] = []

    def flush():
        if tokens:
            sentences.append(_sentence_from_tags(tokens, tags, f"sent-{len(sentences)}"))
        tokens.clear()
        tags.clear()

    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            flush()
            continue
        parts = line.rstrip("\r\n").split("\t") if "\t" in line else line.split()
        if len(parts) < 2:
            raise AnnotationError(f"line {lineno}: expected 'token<TAB>tag', got {line!r}")
        tokens.append(parts[0])
        tags.append(parts[-1].strip())
    flush()
    return sentences


def _sentence_from_tags(tokens: list[str], tags: list[str], source_id: str) -> AnnotatedSentence:
    spans = []
    start = label = None
    for j, tag in enumerate(tags + ["O"]):
        prefix, _, lab = tag.partition("-")
        if prefix == "I" and (start is None or lab != label):
            logger.warning("%s: I-%s at token %d without a preceding B; treating as B", source_id, lab, j)
            prefix = "B"
        if prefix in ("B", "O") and start is not None:
            spans.append(Span(start, j - 1, label))
            start = label = None
        if prefix == "B":
            start, label = j, lab
        elif prefix not in ("I", "O"):
            raise AnnotationError(f"{source_id}: unknown tag {tag!r}")
    return AnnotatedSentence(tuple(tokens), tuple(spans), source_id)


def _parse_records(text: str) -> list[AnnotatedSentence]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        spans = sorted(Span(int(s), int(e), str(lab)) for s, e, lab in rec.get("spans", []))
        out.append(AnnotatedSentence(rec["tokens"], spans, str(rec.get("id", f"sent-{lineno - 1}"))))
    return out


def parse_annotations(raw_text: str | bytes) -> list[AnnotatedSentence]:
    """Parse BIO or JSON-lines annotation content into sentences.

    Bytes input must be valid UTF-8; a :class:`UnicodeDecodeError` is raised
    otherwise. Sentences are assumed to be pre-segmented.
    """
    if isinstance(raw_text, bytes):
        raw_text = raw_text.decode("utf-8")
    first = next((ln.strip() for ln in raw_text.splitlines() if ln.strip()), "")
    if first.startswith("{"):
        return _parse_records(raw_text)
    return _parse_bio(raw_text)


def read_annotations(path: str | Path) -> list[AnnotatedSentence]:
    sentences = parse_annotations(Path(path).read_bytes())
    stem = Path(path).stem
    return [
        s if s.source_id and not s.source_id.startswith("sent-") else replace(s, source_id=f"{stem}:{s.source_id}")
        for s in sentences
    ]


def write_sentences(path: str | Path, sentences: Iterable[AnnotatedSentence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sentences:
            fh.write(json.dumps(s.to_record(), ensure_ascii=False) + "\n")


def write_prompts(path: str | Path, prompts: Iterable[PromptInstance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in prompts:
            fh.write(json.dumps(p.to_record(), ensure_ascii=False) + "\n")


def read_prompts(path: str | Path) -> list[PromptInstance]:
    with open(path, encoding="utf-8") as fh:
        return [PromptInstance.from_record(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# masking and prompt types


def classify_prompt_type(
    mask_spans: Sequence[tuple[int, int]], n: int, tokens: Sequence[str] | None = None
) -> PromptType:
    """Assign a prompt type from the mask layout.

    When ``tokens`` is given, a single trailing ``.``/``?``/``!`` is ignored,
    so ``"... complete [MASK] ."`` is a prefix prompt.
    """
    _check_spans(mask_spans, n)
    if not mask_spans:
        return PromptType.NO_BLANK
    if len(mask_spans) > 1:
        return PromptType.MIXED
    start, end = mask_spans[0][:2]
    last = n - 1
    if tokens is not None and n > 1 and tokens[-1] in TERMINAL_PUNCTUATION and end < n - 1:
        last = n - 2
    if start == 0 and end >= last:
        logger.warning("mask span covers the whole sequence (n=%d); classifying as cloze", n)
        return PromptType.CLOZE
    if start == 0:
        return PromptType.POSTFIX
    if end >= last:
        return PromptType.PREFIX
    return PromptType.CLOZE


def _mask_tokens(tokens: Sequence[str], spans: Sequence[tuple[int, int]]) -> tuple[list[str], list[tuple[str, ...]]]:
    out = list(tokens)
    gold = []
    for s, e in spans:
        gold.append(tuple(tokens[s : e + 1]))
        out[s : e + 1] = [MASK] * (e - s + 1)
    return out, gold


def apply_custom_masking(sentence: AnnotatedSentence) -> PromptInstance:
    spans = [(s.start, s.end) for s in sentence.outcome_spans]
    tokens, gold = _mask_tokens(sentence.tokens, spans)
    return PromptInstance(
        tokens, spans, gold, classify_prompt_type(spans, len(tokens), sentence.tokens), sentence.source_id
    )


def _runs(positions: Sequence[int]) -> list[tuple[int, int]]:
    spans: list[tuple[int, int]] = []
    for p in positions:
        if spans and spans[-1][1] == p - 1:
            spans[-1] = (spans[-1][0], p)
        else:
            spans.append((p, p))
    return spans


def apply_random_masking(sentence: AnnotatedSentence, rate: float = 0.15, seed: int = 0) -> PromptInstance:
    """Mask ``round(rate * n)`` distinct positions drawn uniformly at random.

    Adjacent masked positions merge into a single mask span.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    n = len(sentence.tokens)
    k = round_half_up(rate * n)
    rng = np.random.default_rng(seed)
    positions = sorted(int(p) for p in rng.choice(n, size=k, replace=False)) if k else []
    spans = _runs(positions)
    tokens, gold = _mask_tokens(sentence.tokens, spans)
    return PromptInstance(
        tokens, spans, gold, classify_prompt_type(spans, n, sentence.tokens), sentence.source_id
    )


def mask_corpus(
    sentences: Sequence[AnnotatedSentence], masking: str = "custom", rate: float = 0.15, seed: int = 0
) -> list[PromptInstance]:
    if masking == "custom":
        return [apply_custom_masking(s) for s in sentences]
    if masking == "random":
        # per-sentence seeds keep each instance independent of corpus order
        seeds = np.random.SeedSequence(seed).spawn(len(sentences))
        return [
            apply_random_masking(s, rate, int(ss.generate_state(1)[0])) for s, ss in zip(sentences, seeds)
        ]
    raise ValueError(f"unknown masking mode {masking!r}")


# ---------------------------------------------------------------------------
# splits


def split_dataset(instances: Sequence, spec: SplitSpec) -> tuple[list, list]:
    n = len(instances)
    order = np.random.default_rng(spec.seed).permutation(n)
    cut = round_half_up(spec.train_fraction * n)
    return [instances[i] for i in order[:cut]], [instances[i] for i in order[cut:]]


def _answer_key(tokens: Sequence[str]) -> tuple[str, ...]:
    return tuple(t.lower() for t in tokens)


def multiset_jaccard(a: Sequence[str], b: Sequence[str]) -> float:
    ca, cb = Counter(a), Counter(b)
    union = sum((ca | cb).values())
    if union == 0:
        return 1.0
    return sum((ca & cb).values()) / union


def answer_frequencies(train: Sequence[PromptInstance]) -> Counter:
    """Number of train prompts containing each (lower-cased) gold answer."""
    freq: Counter = Counter()
    for p in train:
        freq.update({_answer_key(a) for a in p.gold_answers})
    return freq


def tag_frequencies(train: Sequence[PromptInstance], test: Sequence[PromptInstance]) -> list[PromptInstance]:
    freq = answer_frequencies(train)
    return [replace(p, answer_frequencies=[freq[_answer_key(a)] for a in p.gold_answers]) for p in test]


def build_generalisation_testset(
    train: Sequence[PromptInstance], test: Sequence[PromptInstance], spec: SplitSpec
) -> list[PromptInstance]:
    """Keep test prompts whose context differs from train prompts sharing an answer.

    A test prompt is dropped if its context tokens have a multiset Jaccard
    overlap above ``spec.context_overlap_threshold`` with any train prompt
    that has one of the same gold answers. Retained prompts carry per-answer
    train frequencies (0 means zero-shot).
    """
    by_answer: dict[tuple[str, ...], list[int]] = defaultdict(list)
    for i, p in enumerate(train):
        for key in {_answer_key(a) for a in p.gold_answers}:
            by_answer[key].append(i)
    contexts = [[t.lower() for t in p.context_tokens()] for p in train]

    kept = []
    for p in test:
        if not p.mask_spans:
            continue
        keys = [_answer_key(a) for a in p.gold_answers]
        ctx = [t.lower() for t in p.context_tokens()]
        related = sorted({i for k in keys for i in by_answer.get(k, ())})
        if any(multiset_jaccard(ctx, contexts[i]) > spec.context_overlap_threshold for i in related):
            continue
        kept.append(replace(p, answer_frequencies=[len(by_answer.get(k, ())) for k in keys]))
    return kept


# ---------------------------------------------------------------------------
# synthetic corpus

_TYPE_WEIGHTS = {
    PromptType.NO_BLANK: 0.2,
    PromptType.PREFIX: 0.15,
    PromptType.POSTFIX: 0.15,
    PromptType.CLOZE: 0.25,
    PromptType.MIXED: 0.25,
}
_SPAN_LENGTH_WEIGHTS = np.array([0.35, 0.3, 0.2, 0.1, 0.05])


def _layout(rng: np.random.Generator, ptype: PromptType, lengths: list[int], n: int) -> list[tuple[int, int]]:
    m = len(lengths)
    lo = [0] + [1] * (m - 1) + [0]
    fixed = [False] * (m + 1)
    if ptype is PromptType.PREFIX:
        lo[0], fixed[-1] = 1, True
    elif ptype is PromptType.POSTFIX:
        lo[-1], fixed[0] = 1, True
    elif ptype is PromptType.CLOZE:
        lo[0] = lo[-1] = 1
    free = n - sum(lengths) - sum(lo)
    flexible = [i for i in range(m + 1) if not fixed[i]]
    extra = rng.multinomial(free, np.full(len(flexible), 1 / len(flexible)))
    gaps = list(lo)
    for i, x in zip(flexible, extra):
        gaps[i] += int(x)
    spans, pos = [], gaps[0]
    for length, gap in zip(lengths, gaps[1:]):
        spans.append((pos, pos + length - 1))
        pos += length + gap
    return spans


def generate_synthetic_corpus(
    seed: int, n_sentences: int, vocab_size: int, n_outcomes: int | None = None
) -> list[AnnotatedSentence]:
    """Random sentences over tokens ``w0 .. w{vocab_size-1}`` with outcome spans.

    Outcome phrases (1-5 tokens) come from a small lexicon sampled with
    Zipf-like weights, so the same outcome recurs across sentences as it does
    in trial abstracts. Sentence types are drawn so that every prompt type
    appears at least once when ``n_sentences >= 5``.
    """
    if vocab_size < 20 or n_sentences < 1:
        raise ValueError("need vocab_size >= 20 and n_sentences >= 1")
    rng = np.random.default_rng(seed)
    n_outcomes = n_outcomes or max(5, n_sentences // 4)

    def word() -> str:
        return f"w{int(rng.integers(vocab_size))}"

    lexicon = [
        tuple(word() for _ in range(int(rng.choice(5, p=_SPAN_LENGTH_WEIGHTS)) + 1)) for _ in range(n_outcomes)
    ]
    zipf = 1.0 / np.arange(1, n_outcomes + 1)
    zipf /= zipf.sum()

    types = list(PromptType)[: min(5, n_sentences)]
    weights = np.array(list(_TYPE_WEIGHTS.values()))
    keys = list(_TYPE_WEIGHTS)
    types += [keys[i] for i in rng.choice(len(keys), size=n_sentences - len(types), p=weights)]
    types = [types[i] for i in rng.permutation(len(types))]

    sentences = []
    for idx, ptype in enumerate(types):
        m = {PromptType.NO_BLANK: 0, PromptType.MIXED: int(rng.integers(2, 5))}.get(ptype, 1)
        outcomes = [lexicon[i] for i in rng.choice(n_outcomes, size=m, replace=m > n_outcomes, p=zipf)]
        lengths = [len(o) for o in outcomes]
        required = sum(lengths) + max(m - 1, 0) + (2 if ptype is PromptType.CLOZE else 1)
        n = min(40, max(int(rng.integers(5, 41)), required))
        spans = _layout(rng, ptype, lengths, n) if m else []
        tokens = [word() for _ in range(n)]
        for (s, e), outcome in zip(spans, outcomes):
            tokens[s : e + 1] = outcome
        sentences.append(AnnotatedSentence(tokens, [Span(s, e) for s, e in spans], f"synth-{seed}-{idx}"))
    return sentences
