"""Classification and generation metrics.

All scores are stored in [0, 1]; report rendering multiplies ROUGE/BLEU by
100. Any 0/0 ratio is defined as 0. Candidates and references are tokenized
with the same tokenizer as the models.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .text import tokenize

BLEU_EPSILON = 1e-9  # substituted for zero modified precisions


@dataclass(frozen=True)
class ConfusionMatrix:
    labels: tuple
    counts: tuple  # rows indexed by true label, columns by predicted

    def total(self) -> int:
        return sum(sum(row) for row in self.counts)

    def row_sums(self) -> list[int]:
        return [sum(row) for row in self.counts]


@dataclass
class MetricReport:
    per_class: dict = field(default_factory=dict)  # label -> (P, R, F1, support)
    weighted_f1: float | None = None
    positive: tuple | None = None  # (P, R, F1) for the positive class
    rouge1: float | None = None
    rouge2: float | None = None
    bleu1: float | None = None
    bleu2: float | None = None
    bleu3: float | None = None

    def to_json(self) -> dict:
        return {
            "per_class": {
                str(k): list(v) for k, v in sorted(self.per_class.items(), key=lambda x: str(x[0]))
            },
            "weighted_f1": self.weighted_f1,
            "positive": list(self.positive) if self.positive else None,
            "rouge1": self.rouge1,
            "rouge2": self.rouge2,
            "bleu1": self.bleu1,
            "bleu2": self.bleu2,
            "bleu3": self.bleu3,
        }


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


def prf1(preds: list, golds: list) -> tuple[float, float, float]:
    """Precision/recall/F1 of the positive (True) class."""
    if len(preds) != len(golds):
        raise ValueError("prediction/gold length mismatch")
    if not preds:
        raise ValueError("empty inputs")
    tp = sum(1 for p, g in zip(preds, golds) if p and g)
    fp = sum(1 for p, g in zip(preds, golds) if p and not g)
    fn = sum(1 for p, g in zip(preds, golds) if not p and g)
    return prf1_from_counts(tp, fp, fn)


def prf1_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return precision, recall, f1


def per_class_prf1(preds: list, golds: list, labels=None) -> dict:
    """Per-class (P, R, F1, support). Prediction values outside the label
    set (e.g. a pipeline 'missed' sentinel) count as false negatives only."""
    if len(preds) != len(golds):
        raise ValueError("prediction/gold length mismatch")
    if labels is None:
        seen = []
        for g in golds:
            if g not in seen:
                seen.append(g)
        labels = seen
    out = {}
    for label in labels:
        tp = sum(1 for p, g in zip(preds, golds) if p == label and g == label)
        fp = sum(1 for p, g in zip(preds, golds) if p == label and g != label)
        fn = sum(1 for p, g in zip(preds, golds) if p != label and g == label)
        support = sum(1 for g in golds if g == label)
        out[label] = (*prf1_from_counts(tp, fp, fn), support)
    return out


def weighted_f1(preds: list, golds: list, labels=None) -> float:
    """Support-weighted mean of per-class F1 over the gold label set."""
    if not golds:
        raise ValueError("empty inputs")
    scores = per_class_prf1(preds, golds, labels)
    total = sum(support for *_, support in scores.values())
    if total == 0:
        return 0.0
    return sum(f1 * support for _, _, f1, support in scores.values()) / total


def confusion(preds: list, golds: list, labels: list) -> ConfusionMatrix:
    if len(preds) != len(golds):
        raise ValueError("prediction/gold length mismatch")
    index = {label: i for i, label in enumerate(labels)}
    counts = [[0] * len(labels) for _ in labels]
    for p, g in zip(preds, golds):
        if g not in index:
            raise ValueError(f"unknown gold label {g!r}")
        if p not in index:
            raise ValueError(f"unknown predicted label {p!r}")
        counts[index[g]][index[p]] += 1
    return ConfusionMatrix(
        labels=tuple(labels), counts=tuple(tuple(row) for row in counts)
    )


def _ngrams(tokens: list, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: str, reference: str, n: int) -> float:
    """Recall-oriented clipped n-gram overlap against the reference."""
    if n not in (1, 2):
        raise ValueError("n must be 1 or 2")
    ref_tokens = tokenize(reference)
    if not ref_tokens:
        raise ValueError("reference is empty after tokenization")
    ref_grams = _ngrams(ref_tokens, n)
    total = sum(ref_grams.values())
    if total == 0:
        return 0.0
    cand_grams = _ngrams(tokenize(candidate), n)
    overlap = sum(min(count, cand_grams.get(gram, 0)) for gram, count in ref_grams.items())
    return overlap / total


def bleu(candidate: str, reference: str, max_n: int) -> float:
    """Sentence BLEU: geometric mean of modified n-gram precisions up to
    max_n, times the brevity penalty. Zero precisions are replaced by a
    tiny epsilon so higher orders stay defined on short strings."""
    if max_n not in (1, 2, 3):
        raise ValueError("max_n must be 1, 2, or 3")
    cand_tokens = tokenize(candidate)
    ref_tokens = tokenize(reference)
    if not cand_tokens or not ref_tokens:
        raise ValueError("empty candidate or reference after tokenization")
    log_sum = 0.0
    for n in range(1, max_n + 1):
        cand_grams = _ngrams(cand_tokens, n)
        total = sum(cand_grams.values())
        if total == 0:
            precision = 0.0
        else:
            ref_grams = _ngrams(ref_tokens, n)
            clipped = sum(
                min(count, ref_grams.get(gram, 0)) for gram, count in cand_grams.items()
            )
            precision = clipped / total
        log_sum += math.log(precision if precision > 0 else BLEU_EPSILON)
    geo_mean = math.exp(log_sum / max_n)
    c, r = len(cand_tokens), len(ref_tokens)
    brevity = 1.0 if c > r else math.exp(1 - r / c)
    return brevity * geo_mean


def generation_scores(pairs: list) -> dict:
    """Mean ROUGE-1/2 and BLEU-1/2/3 over (candidate, reference) pairs.

    Empty candidates score 0 on every metric rather than erroring, so
    pipeline runs where a stage produced nothing remain scoreable.
    """
    if not pairs:
        return {"rouge1": 0.0, "rouge2": 0.0, "bleu1": 0.0, "bleu2": 0.0, "bleu3": 0.0}
    sums = {"rouge1": 0.0, "rouge2": 0.0, "bleu1": 0.0, "bleu2": 0.0, "bleu3": 0.0}
    for cand, ref in pairs:
        if tokenize(cand):
            sums["rouge1"] += rouge_n(cand, ref, 1)
            sums["rouge2"] += rouge_n(cand, ref, 2)
            sums["bleu1"] += bleu(cand, ref, 1)
            sums["bleu2"] += bleu(cand, ref, 2)
            sums["bleu3"] += bleu(cand, ref, 3)
    n = len(pairs)
    return {k: v / n for k, v in sums.items()}
