"""Krippendorff's alpha for nominal labels via the coincidence matrix."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import CorpusError

MISSING = None


@dataclass
class AnnotationSet:
    """Aligned nominal labels from several annotators.

    ``labels[annotator]`` is a list aligned with ``item_ids``; ``None``
    marks a missing rating.
    """

    item_ids: list
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        for annotator, row in self.labels.items():
            if len(row) != len(self.item_ids):
                raise ValueError(
                    f"annotator {annotator!r}: {len(row)} labels for "
                    f"{len(self.item_ids)} items"
                )

    def item_labels(self) -> list[list]:
        """Per-item label multisets in a fixed annotator order."""
        annotators = sorted(self.labels)
        out = []
        for i in range(len(self.item_ids)):
            out.append(
                [self.labels[a][i] for a in annotators if self.labels[a][i] is not MISSING]
            )
        return out


def load_annotations(path) -> AnnotationSet:
    """Read a JSONL annotation file: {"item": str, "annotator": str, "label": str}."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"annotation file not found: {path}")
    ratings: dict[tuple, str] = {}
    items: list = []
    annotators: list = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            try:
                item, annotator, label = obj["item"], obj["annotator"], obj["label"]
            except (TypeError, KeyError):
                raise CorpusError(
                    f"{path}:{lineno}: expected object with item/annotator/label"
                ) from None
            if item not in items:
                items.append(item)
            if annotator not in annotators:
                annotators.append(annotator)
            ratings[(annotator, item)] = label
    labels = {
        a: [ratings.get((a, it), MISSING) for it in items] for a in annotators
    }
    return AnnotationSet(item_ids=items, labels=labels)


def krippendorff_alpha(annotations: AnnotationSet) -> float:
    """Chance-corrected agreement, alpha = 1 - D_o/D_e, nominal difference.

    Built from the coincidence matrix: each item rated by m >= 2 annotators
    contributes 1/(m-1) to o[c][k] for every ordered pair of its labels from
    distinct annotators. Items with fewer than two labels are excluded.

    If every pairable label belongs to one category, disagreement is
    impossible and 1.0 is returned by convention.
    """
    if len(annotations.labels) < 2:
        raise ValueError("alpha needs at least two annotators")
    pairable = [row for row in annotations.item_labels() if len(row) >= 2]
    if not pairable:
        raise ValueError("alpha undefined: no item has two or more labels")

    categories = sorted({lab for row in pairable for lab in row}, key=repr)
    cat_index = {c: i for i, c in enumerate(categories)}
    k = len(categories)
    coincidence = [[0.0] * k for _ in range(k)]
    for row in pairable:
        m = len(row)
        for a in range(m):
            for b in range(m):
                if a != b:
                    coincidence[cat_index[row[a]]][cat_index[row[b]]] += 1.0 / (m - 1)

    n_c = [sum(coincidence[i]) for i in range(k)]
    n = sum(n_c)
    observed = sum(
        coincidence[i][j] for i in range(k) for j in range(k) if i != j
    ) / n
    expected = sum(
        n_c[i] * n_c[j] for i in range(k) for j in range(k) if i != j
    ) / (n * (n - 1))
    if expected == 0.0:
        # single observed category: no chance disagreement possible
        return 1.0
    return 1.0 - observed / expected
