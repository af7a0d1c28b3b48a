"""Exact/partial match metrics and the per-type, length and frequency breakdowns.

Tokens are compared case-insensitively and every mask span is scored on its
own. Partial match is ``|pred ∩ gold| / max(|pred|, |gold|)`` with multiset
intersection, so both truncated and over-long answers are penalised.
"""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from pbprompt.corpus import MASKED_TYPES, PromptInstance, PromptType

LENGTH_BUCKETS = ("short", "medium", "long")
FREQ_WIDTH = 6
MAX_FREQ_BUCKET = 5  # frequencies >= 30 share the last bucket
ZERO_SHOT = "zero-shot"


@dataclass(frozen=True)
class SpanPrediction:
    predicted: tuple[str, ...]
    gold: tuple[str, ...]
    prompt_type: PromptType
    outcome_train_frequency: int = 0
    prompt_index: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "predicted", tuple(self.predicted))
        object.__setattr__(self, "gold", tuple(self.gold))
        object.__setattr__(self, "prompt_type", PromptType(self.prompt_type))
        if not self.gold:
            raise ValueError("gold span must be nonempty")
        if self.outcome_train_frequency < 0:
            raise ValueError("frequency must be >= 0")


def span_exact(predicted: Sequence[str], gold: Sequence[str]) -> int:
    return int([t.lower() for t in predicted] == [t.lower() for t in gold])


def span_partial(predicted: Sequence[str], gold: Sequence[str]) -> float:
    denom = max(len(predicted), len(gold))
    if denom == 0:
        return 1.0
    overlap = Counter(t.lower() for t in predicted) & Counter(t.lower() for t in gold)
    return sum(overlap.values()) / denom


def exact_match(predictions: Sequence[SpanPrediction]) -> float:
    if not predictions:
        raise ValueError("exact_match of an empty prediction list")
    return 100.0 * sum(span_exact(p.predicted, p.gold) for p in predictions) / len(predictions)


def partial_match(predictions: Sequence[SpanPrediction]) -> float:
    if not predictions:
        raise ValueError("partial_match of an empty prediction list")
    return 100.0 * sum(span_partial(p.predicted, p.gold) for p in predictions) / len(predictions)


def _em_pm(preds):
    if not preds:
        return None, None
    return exact_match(preds), partial_match(preds)


def length_bucket(n_tokens: int) -> str:
    if n_tokens <= 7:
        return "short"
    return "medium" if n_tokens <= 14 else "long"


def frequency_bucket(freq: int) -> int:
    return min(freq // FREQ_WIDTH, MAX_FREQ_BUCKET)


def frequency_label(bucket: int) -> str:
    lo = bucket * FREQ_WIDTH
    return f"[{lo},inf)" if bucket == MAX_FREQ_BUCKET else f"[{lo},{lo + FREQ_WIDTH})"


@dataclass
class TypeRow:
    count: int
    avg_prompt_length: float | None
    em: float | None
    pm: float | None
    n_spans: int = 0


def report_by_prompt_type(predictions: Sequence[SpanPrediction],
                          prompts: Sequence[PromptInstance]) -> dict[PromptType, TypeRow]:
    """One row per masked prompt type: prompt count, mean prompt length, EM, PM.

    ``prediction.prompt_index`` joins each span to its prompt.
    """
    by_type: dict[PromptType, list[SpanPrediction]] = defaultdict(list)
    prompt_ids: dict[PromptType, set[int]] = defaultdict(set)
    for p in predictions:
        by_type[p.prompt_type].append(p)
        if p.prompt_index is None:
            raise ValueError("report_by_prompt_type needs prompt_index on every prediction")
        prompt_ids[p.prompt_type].add(p.prompt_index)
    rows = {}
    for t in MASKED_TYPES:
        ids = sorted(prompt_ids[t])
        em, pm = _em_pm(by_type[t])
        avg = sum(len(prompts[i].tokens) for i in ids) / len(ids) if ids else None
        rows[t] = TypeRow(len(ids), avg, em, pm, len(by_type[t]))
    return rows


@dataclass
class Cell:
    count: int
    pm: float | None
    em: float | None = None


def bucket_analysis(predictions: Sequence[SpanPrediction]) -> dict[tuple[str, str], Cell]:
    """Mean PM for every (gold length bucket, train-frequency bucket) cell."""
    groups: dict[tuple[str, int], list[SpanPrediction]] = defaultdict(list)
    for p in predictions:
        groups[(length_bucket(len(p.gold)), frequency_bucket(p.outcome_train_frequency))].append(p)
    top = max((f for _, f in groups), default=0)
    grid = {}
    for lb in LENGTH_BUCKETS:
        for fb in range(top + 1):
            preds = groups.get((lb, fb), [])
            grid[(lb, frequency_label(fb))] = Cell(len(preds), partial_match(preds) if preds else None)
    return grid


def fewshot_curves(predictions: Sequence[SpanPrediction]) -> dict[PromptType, dict[str, Cell]]:
    """EM/PM per prompt type and train-frequency bucket.

    Frequency 0 is reported on its own as ``"zero-shot"``; the remaining
    buckets are width-6 intervals, so ``[0,6)`` holds frequencies 1-5.
    """
    groups: dict[tuple[PromptType, str], list[SpanPrediction]] = defaultdict(list)
    for p in predictions:
        f = p.outcome_train_frequency
        label = ZERO_SHOT if f == 0 else frequency_label(frequency_bucket(f))
        groups[(p.prompt_type, label)].append(p)
    order = [ZERO_SHOT] + [frequency_label(b) for b in range(MAX_FREQ_BUCKET + 1)]
    curves = {}
    for t in MASKED_TYPES:
        row = {}
        for label in order:
            preds = groups.get((t, label))
            if preds:
                em, pm = _em_pm(preds)
                row[label] = Cell(len(preds), pm, em)
        curves[t] = row
    return curves


def span_predictions(prompts: Sequence[PromptInstance], predicted: Sequence[Sequence[Sequence[str]]]) -> list[SpanPrediction]:
    """Flatten per-prompt predicted spans into scored span records."""
    out = []
    for i, (prompt, spans) in enumerate(zip(prompts, predicted)):
        freqs = prompt.answer_frequencies or (0,) * len(prompt.gold_answers)
        for pred, gold, f in zip(spans, prompt.gold_answers, freqs):
            out.append(SpanPrediction(tuple(pred), gold, prompt.prompt_type, f, i))
    return out


def _fmt(x, spec=".2f"):
    return "-" if x is None else format(x, spec)


@dataclass
class EvalReport:
    em: float
    pm: float
    n_spans: int
    n_prompts: int
    by_type: dict[PromptType, TypeRow]
    length_frequency: dict[tuple[str, str], Cell]
    fewshot: dict[PromptType, dict[str, Cell]]
    mode: str = ""
    diagnostics: dict = field(default_factory=dict)

    def metric_records(self) -> list[dict]:
        recs = [{"breakdown": "overall", "cell": "all", "count": self.n_spans, "em": self.em, "pm": self.pm}]
        for t, row in self.by_type.items():
            recs.append({"breakdown": "prompt_type", "cell": t.value, "count": row.count,
                         "spans": row.n_spans, "avg_prompt_length": row.avg_prompt_length,
                         "em": row.em, "pm": row.pm})
        for (lb, fb), c in self.length_frequency.items():
            recs.append({"breakdown": "length_x_frequency", "cell": f"{lb}|{fb}", "count": c.count, "pm": c.pm})
        for t, row in self.fewshot.items():
            for label, c in row.items():
                recs.append({"breakdown": "fewshot", "cell": f"{t.value}|{label}", "count": c.count,
                             "em": c.em, "pm": c.pm})
        return recs

    def to_records(self) -> list[dict]:
        recs = self.metric_records()
        for key, value in self.diagnostics.items():
            recs.append({"breakdown": "attention", "cell": key, "value": value})
        return recs

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.to_records())

    def to_text(self) -> str:
        lines = [f"mode: {self.mode or '-'}",
                 f"overall  spans={self.n_spans}  prompts={self.n_prompts}  EM={self.em:.2f}  PM={self.pm:.2f}", ""]
        lines.append(f"{'type':<10}{'#':>7}{'avg len':>10}{'EM':>9}{'PM':>9}")
        for t, row in self.by_type.items():
            lines.append(f"{t.value:<10}{row.count:>7}{_fmt(row.avg_prompt_length, '.1f'):>10}"
                         f"{_fmt(row.em):>9}{_fmt(row.pm):>9}")
        labels = sorted({fb for _, fb in self.length_frequency}, key=lambda s: int(s[1:].split(",")[0]))
        lines += ["", "PM by outcome length x train frequency (count in parentheses)",
                  f"{'length':<8}" + "".join(f"{fb:>16}" for fb in labels)]
        for lb in LENGTH_BUCKETS:
            cells = [self.length_frequency.get((lb, fb), Cell(0, None)) for fb in labels]
            lines.append(f"{lb:<8}" + "".join(f"{_fmt(c.pm) + f' ({c.count})':>16}" for c in cells))
        lines += ["", "few/zero-shot EM / PM by train frequency"]
        for t, row in self.fewshot.items():
            body = "  ".join(f"{label}: {_fmt(c.em)}/{_fmt(c.pm)} ({c.count})" for label, c in row.items())
            lines.append(f"{t.value:<10}{body or '-'}")
        if self.diagnostics:
            lines += ["", "attention diagnostics"]
            lines += [f"  {k}: {v:.4f}" for k, v in self.diagnostics.items()]
        return "\n".join(lines) + "\n"


def build_report(predictions: Sequence[SpanPrediction], prompts: Sequence[PromptInstance],
                 mode: str = "", diagnostics: dict | None = None) -> EvalReport:
    by_type = report_by_prompt_type(predictions, prompts)
    return EvalReport(
        em=exact_match(predictions),
        pm=partial_match(predictions),
        n_spans=len(predictions),
        n_prompts=sum(r.count for r in by_type.values()),
        by_type=by_type,
        length_frequency=bucket_analysis(predictions),
        fewshot=fewshot_curves(predictions),
        mode=mode,
        diagnostics=diagnostics or {},
    )


def attention_diagnostics(prompts: Iterable[PromptInstance], results: Sequence[dict]) -> dict:
    """Mean attention mass on the anchor span and mean attention entropy."""
    import math

    mass, entropy, n = 0.0, 0.0, 0
    for prompt, res in zip(prompts, results):
        if "attention" not in res or not prompt.mask_spans:
            continue
        for (s, e), row in zip(prompt.mask_spans, res["attention"]):
            mass += sum(row[s : e + 1])
            entropy -= sum(a * math.log(a) for a in row if a > 0)
            n += 1
    if not n:
        return {}
    return {"anchor_mass": mass / n, "entropy": entropy / n}
