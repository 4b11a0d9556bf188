"""Evaluation metrics: entity F1, micro/macro F1, ranked-answer scoring.

All scores are on a 0-100 scale. Functions are pure and make no
assumptions about where predictions came from.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

MAX_RANKED_ANSWERS = 5


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class EntityPrediction:
    """One typed entity occupying the half-open word span [start, end)."""

    sentence_id: Hashable
    label: str
    start: int
    end: int

    def __post_init__(self):
        if self.start < 0 or self.start >= self.end:
            raise MetricsError(
                f"entity span [{self.start}, {self.end}) is not a valid half-open range"
            )


@dataclass(frozen=True)
class PrecisionRecallF1:
    precision: float
    recall: float
    f1: float


def _prf(tp: int, fp: int, fn: int) -> PrecisionRecallF1:
    p = 100.0 * tp / (tp + fp) if tp + fp else 0.0
    r = 100.0 * tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return PrecisionRecallF1(p, r, f1)


def entity_f1(
    gold: Iterable[EntityPrediction], predicted: Iterable[EntityPrediction]
) -> PrecisionRecallF1:
    """Exact-match F1 on (sentence, label, span) triples."""
    gold_set = set(gold)
    pred_set = set(predicted)
    tp = len(gold_set & pred_set)
    return _prf(tp, len(pred_set) - tp, len(gold_set) - tp)


def _as_label_sets(values: Sequence, multi_label: bool) -> list[frozenset]:
    if multi_label:
        return [frozenset(v) for v in values]
    return [frozenset((v,)) for v in values]


def micro_macro_f1(
    gold: Sequence,
    predicted: Sequence,
    label_space: Sequence[str],
    mode: str = "micro",
    multi_label: bool = False,
) -> float:
    """F1 over per-(example, label) decisions.

    ``gold`` and ``predicted`` are aligned lists of labels (or label
    collections when ``multi_label``). Micro pools counts across labels;
    macro averages per-label F1, scoring 0 for labels never matched.
    """
    if mode not in ("micro", "macro"):
        raise MetricsError(f"mode must be 'micro' or 'macro', got {mode!r}")
    if len(gold) != len(predicted):
        raise MetricsError(
            f"gold and predicted differ in length: {len(gold)} vs {len(predicted)}"
        )
    space = list(label_space)
    known = set(space)
    if len(known) != len(space):
        raise MetricsError("label_space contains duplicates")
    gold_sets = _as_label_sets(gold, multi_label)
    pred_sets = _as_label_sets(predicted, multi_label)
    for kind, sets in (("gold", gold_sets), ("predicted", pred_sets)):
        for i, labels in enumerate(sets):
            unknown = labels - known
            if unknown:
                raise MetricsError(
                    f"{kind} example {i} uses labels outside the label space: {sorted(unknown)}"
                )
    tp = {label: 0 for label in space}
    fp = dict(tp)
    fn = dict(tp)
    for g, p in zip(gold_sets, pred_sets):
        for label in g & p:
            tp[label] += 1
        for label in p - g:
            fp[label] += 1
        for label in g - p:
            fn[label] += 1
    if mode == "micro":
        return _prf(sum(tp.values()), sum(fp.values()), sum(fn.values())).f1
    per_label = [_prf(tp[l], fp[l], fn[l]).f1 for l in space]
    return sum(per_label) / len(per_label)


def _normalize_answer(text: str) -> str:
    return text.strip().casefold()


@dataclass(frozen=True)
class RankedAnswerList:
    """Up to five candidate answers in rank order plus the gold set."""

    candidates: tuple[str, ...]
    gold: frozenset[str]

    def __post_init__(self):
        if len(self.candidates) > MAX_RANKED_ANSWERS:
            raise MetricsError(
                f"at most {MAX_RANKED_ANSWERS} ranked candidates allowed, "
                f"got {len(self.candidates)}"
            )
        if any(not c for c in self.candidates):
            raise MetricsError("ranked candidates must be non-empty strings")

    def first_hit_rank(self) -> int | None:
        """1-based rank of the first correct candidate, or None."""
        gold = {_normalize_answer(g) for g in self.gold}
        for rank, cand in enumerate(self.candidates, start=1):
            if _normalize_answer(cand) in gold:
                return rank
        return None


@dataclass(frozen=True)
class FactoidScores:
    strict_accuracy: float
    lenient_accuracy: float
    mrr: float


def bioasq_factoid(items: Sequence[RankedAnswerList]) -> FactoidScores:
    """Strict accuracy, lenient accuracy, and MRR over ranked answers.

    Strict counts rank-1 hits, lenient any hit in the list, MRR averages
    1/rank of the first hit (0 when absent). Matching is case-insensitive
    after whitespace trimming.
    """
    if not items:
        raise MetricsError("no ranked answer lists to score")
    strict = lenient = 0
    rr = 0.0
    for item in items:
        rank = item.first_hit_rank()
        if rank is not None:
            lenient += 1
            rr += 1.0 / rank
            if rank == 1:
                strict += 1
    n = len(items)
    return FactoidScores(100.0 * strict / n, 100.0 * lenient / n, 100.0 * rr / n)


def qa_average(scores: Sequence[float]) -> float:
    """Mean of the factoid score cells that make up one QA column."""
    if not scores:
        raise MetricsError("no QA scores to average")
    return sum(scores) / len(scores)


def overall_average(ner_avg: float, re_avg: float, dc_avg: float, qa_avg: float) -> float:
    """Cross-task weighted mean: (8*NER + 4*RE + 2*DC + QA) / 15.

    The weights are the benchmark's dataset counts per task, with the
    single QA dataset contributing its six-cell average once.
    """
    return (8.0 * ner_avg + 4.0 * re_avg + 2.0 * dc_avg + qa_avg) / 15.0
