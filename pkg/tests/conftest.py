import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from speaker_profiler.corpus import (
    Dialogue,
    PersonaType,
    Utterance,
    load_corpus,
)

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def fixture_corpus_path() -> Path:
    return DATA_DIR / "fixture_corpus.jsonl"


@pytest.fixture(scope="session")
def fixture_corpus(fixture_corpus_path):
    return load_corpus(fixture_corpus_path)


@pytest.fixture(scope="session")
def annotated_example_dialogue(fixture_corpus) -> Dialogue:
    """The two-speaker, four-utterance annotated example (test split)."""
    return next(d for d in fixture_corpus["test"] if d.id == "t-01")


def make_dialogue(dlg_id, split, rows):
    """rows: (speaker, text, type value or None, persona value or None)."""
    utts = []
    for i, (speaker, text, ptype, value) in enumerate(rows):
        utts.append(Utterance(
            index=i, speaker_id=speaker, text=text,
            has_persona=ptype is not None,
            persona_type=PersonaType(ptype) if ptype else None,
            persona_value=value,
        ))
    return Dialogue(id=dlg_id, split=split, utterances=tuple(utts))


def separable_discovery_corpus(n_dialogues=20):
    """Synthetic corpus where persona utterances always contain a marker
    token, making the discovery task linearly separable."""
    positive = [
        "i really love MARKER hiking in the hills",
        "my job is MARKER teaching school",
        "MARKER my brother lives next door",
        "i am very MARKER organized you know",
    ]
    negative = [
        "what time is it",
        "please pass the salt",
        "that movie starts soon",
        "nothing much happened today",
    ]
    types = ["likes", "occupation", "relation", "trait"]
    dialogues = []
    for d in range(n_dialogues):
        rows = []
        for turn in range(4):
            speaker = "A" if turn % 2 == 0 else "B"
            if (d + turn) % 2 == 0:
                k = (d + turn) % len(positive)
                rows.append((speaker, positive[k], types[k], "value"))
            else:
                rows.append((speaker, negative[(d + turn) % len(negative)], None, None))
        dialogues.append(make_dialogue(f"syn-{d:03d}", "train", rows))
    return {"train": dialogues, "dev": [], "test": []}
