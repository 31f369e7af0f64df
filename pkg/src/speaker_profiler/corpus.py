"""Corpus schema, JSONL loading, validation, and per-split statistics.

A corpus file holds one dialogue per line:

    {"id": str, "split": "train"|"dev"|"test",
     "utterances": [{"speaker": str, "text": str, "persona": bool,
                     "type": "trait"|"likes"|"relation"|"occupation"|"misc"|null,
                     "value": str|null}]}

Everything loaded here is immutable; a loaded corpus can be shared freely
across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

SPLITS = ("train", "dev", "test")


class CorpusError(Exception):
    """Raised on unreadable files, malformed lines, or schema violations."""


class PersonaType(Enum):
    TRAIT = "trait"
    LIKES = "likes"
    RELATION = "relation"
    OCCUPATION = "occupation"
    MISC = "misc"

    @classmethod
    def order(cls) -> list["PersonaType"]:
        """Canonical class order used everywhere labels become indices."""
        return [cls.TRAIT, cls.LIKES, cls.RELATION, cls.OCCUPATION, cls.MISC]

    @property
    def index(self) -> int:
        return PersonaType.order().index(self)


@dataclass(frozen=True)
class Utterance:
    index: int
    speaker_id: str
    text: str
    has_persona: bool
    persona_type: Optional[PersonaType] = None
    persona_value: Optional[str] = None


@dataclass(frozen=True)
class Dialogue:
    id: str
    split: str
    utterances: tuple[Utterance, ...]

    @property
    def speakers(self) -> list[str]:
        seen: list[str] = []
        for u in self.utterances:
            if u.speaker_id not in seen:
                seen.append(u.speaker_id)
        return seen


@dataclass(frozen=True)
class TypedInstance:
    """A context window ending in a persona-bearing target utterance."""

    dialogue_id: str
    context: tuple[Utterance, ...]
    target: Utterance
    gold_type: Optional[PersonaType] = None
    gold_value: Optional[str] = None

    @property
    def instance_id(self) -> str:
        return f"{self.dialogue_id}:{self.target.index}"

    @property
    def all_utterances(self) -> tuple[Utterance, ...]:
        return self.context + (self.target,)


@dataclass(frozen=True)
class Violation:
    dialogue_id: str
    utterance_index: int
    rule: str

    def __str__(self) -> str:
        return f"{self.dialogue_id}[{self.utterance_index}]: {self.rule}"


@dataclass(frozen=True)
class SplitStats:
    dialogues: int
    utterances: int
    mean_speakers_per_dialogue: float
    persona_utterances: int
    mean_persona_per_dialogue: float
    per_type: dict  # PersonaType -> int


@dataclass(frozen=True)
class CorpusStats:
    per_split: dict  # split name -> SplitStats, absent splits omitted


Corpus = dict  # split name -> list[Dialogue]


def _utterance_from_json(obj: dict, dialogue_id: str, index: int) -> Utterance:
    where = f"dialogue {dialogue_id!r}, utterance {index}"
    if not isinstance(obj, dict):
        raise CorpusError(f"{where}: utterance is not an object")
    for key in ("speaker", "text", "persona"):
        if key not in obj:
            raise CorpusError(f"{where}: missing field {key!r}")
    speaker = obj["speaker"]
    text = obj["text"]
    persona = obj["persona"]
    if not isinstance(speaker, str) or not speaker:
        raise CorpusError(f"{where}: speaker must be a non-empty string")
    if not isinstance(text, str) or not text:
        raise CorpusError(f"{where}: text must be a non-empty string")
    if not isinstance(persona, bool):
        raise CorpusError(f"{where}: persona must be a boolean")
    raw_type = obj.get("type")
    raw_value = obj.get("value")
    ptype: Optional[PersonaType] = None
    if raw_type is not None:
        try:
            ptype = PersonaType(raw_type)
        except ValueError:
            raise CorpusError(f"{where}: unknown persona type {raw_type!r}") from None
    if persona and ptype is None:
        raise CorpusError(f"{where}: persona utterance without a type")
    if not persona and ptype is not None:
        raise CorpusError(f"{where}: type {raw_type!r} on a non-persona utterance")
    if ptype is not None and (not isinstance(raw_value, str) or not raw_value):
        raise CorpusError(f"{where}: typed utterance needs a non-empty value")
    if ptype is None and raw_value is not None:
        raise CorpusError(f"{where}: value present without a type")
    return Utterance(
        index=index,
        speaker_id=speaker,
        text=text,
        has_persona=persona,
        persona_type=ptype,
        persona_value=raw_value if ptype is not None else None,
    )


def dialogue_from_json(obj: dict) -> Dialogue:
    if not isinstance(obj, dict):
        raise CorpusError("dialogue line is not a JSON object")
    dlg_id = obj.get("id")
    split = obj.get("split")
    raw_utts = obj.get("utterances")
    if not isinstance(dlg_id, str) or not dlg_id:
        raise CorpusError("dialogue id must be a non-empty string")
    if split not in SPLITS:
        raise CorpusError(f"dialogue {dlg_id!r}: split must be one of {SPLITS}")
    if not isinstance(raw_utts, list) or not raw_utts:
        raise CorpusError(f"dialogue {dlg_id!r}: utterances must be a non-empty list")
    utts = tuple(
        _utterance_from_json(u, dlg_id, i) for i, u in enumerate(raw_utts)
    )
    return Dialogue(id=dlg_id, split=split, utterances=utts)


def dialogue_to_json(dlg: Dialogue) -> dict:
    return {
        "id": dlg.id,
        "split": dlg.split,
        "utterances": [
            {
                "speaker": u.speaker_id,
                "text": u.text,
                "persona": u.has_persona,
                "type": u.persona_type.value if u.persona_type else None,
                "value": u.persona_value,
            }
            for u in dlg.utterances
        ],
    }


def load_corpus(path) -> Corpus:
    """Load a JSONL corpus into {split: [Dialogue, ...]}, preserving order."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus file not found: {path}")
    corpus: Corpus = {s: [] for s in SPLITS}
    seen_ids: set[str] = set()
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
                dlg = dialogue_from_json(obj)
            except CorpusError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from None
            if dlg.id in seen_ids:
                raise CorpusError(f"{path}:{lineno}: duplicate dialogue id {dlg.id!r}")
            seen_ids.add(dlg.id)
            corpus[dlg.split].append(dlg)
    return corpus


def save_corpus(corpus: Corpus, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for split in SPLITS:
            for dlg in corpus.get(split, []):
                fh.write(json.dumps(dialogue_to_json(dlg), sort_keys=True) + "\n")


def validate_annotations(corpus: Corpus) -> list[Violation]:
    """Check annotation-consistency rules; violations are data, not errors.

    The loader already rejects structurally broken files, so this is mainly
    useful for corpora assembled in memory or loaded leniently elsewhere.
    """
    violations: list[Violation] = []
    for split in SPLITS:
        for dlg in corpus.get(split, []):
            for u in dlg.utterances:
                if u.has_persona and u.persona_type is None:
                    violations.append(Violation(dlg.id, u.index, "type-missing"))
                if not u.has_persona and u.persona_type is not None:
                    violations.append(Violation(dlg.id, u.index, "type-on-negative"))
                if u.persona_type is not None and not u.persona_value:
                    violations.append(Violation(dlg.id, u.index, "empty-value"))
                if u.persona_type is None and u.persona_value is not None:
                    violations.append(Violation(dlg.id, u.index, "value-without-type"))
                if not u.text:
                    violations.append(Violation(dlg.id, u.index, "empty-text"))
    return violations


def corpus_stats(corpus: Corpus) -> CorpusStats:
    per_split: dict[str, SplitStats] = {}
    for split in SPLITS:
        dialogues = corpus.get(split, [])
        if not dialogues:
            continue
        n_dlg = len(dialogues)
        n_utt = sum(len(d.utterances) for d in dialogues)
        n_speakers = sum(len(d.speakers) for d in dialogues)
        persona_utts = [
            u for d in dialogues for u in d.utterances if u.has_persona
        ]
        per_type = {t: 0 for t in PersonaType.order()}
        for u in persona_utts:
            per_type[u.persona_type] += 1
        per_split[split] = SplitStats(
            dialogues=n_dlg,
            utterances=n_utt,
            mean_speakers_per_dialogue=n_speakers / n_dlg,
            persona_utterances=len(persona_utts),
            mean_persona_per_dialogue=len(persona_utts) / n_dlg,
            per_type=per_type,
        )
    return CorpusStats(per_split=per_split)


def build_instances(dialogue: Dialogue, targets: Optional[list[int]] = None) -> list[TypedInstance]:
    """Build context windows for target utterances.

    The context is every utterance from the dialogue start through the one
    before the target. With ``targets=None``, gold persona utterances are
    used; otherwise the given indices are (e.g. upstream predictions).
    """
    if targets is None:
        targets = [u.index for u in dialogue.utterances if u.has_persona]
    instances = []
    for idx in sorted(targets):
        if idx < 0 or idx >= len(dialogue.utterances):
            raise CorpusError(
                f"dialogue {dialogue.id!r}: target index {idx} out of range"
            )
        target = dialogue.utterances[idx]
        instances.append(
            TypedInstance(
                dialogue_id=dialogue.id,
                context=dialogue.utterances[:idx],
                target=target,
                gold_type=target.persona_type,
                gold_value=target.persona_value,
            )
        )
    return instances
