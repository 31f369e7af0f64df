import json

import pytest

from speaker_profiler.corpus import (
    CorpusError,
    PersonaType,
    Utterance,
    build_instances,
    corpus_stats,
    load_corpus,
    save_corpus,
    validate_annotations,
)
from conftest import make_dialogue


def test_load_annotated_example(fixture_corpus, annotated_example_dialogue):
    dlg = annotated_example_dialogue
    assert len(dlg.utterances) == 4
    assert dlg.speakers == ["Chandler", "Jade"]
    assert [u.has_persona for u in dlg.utterances] == [False, True, True, True]
    assert dlg.utterances[1].persona_type == PersonaType.OCCUPATION
    assert dlg.utterances[1].persona_value == "Teaches aerobics"
    assert dlg.utterances[3].persona_value == "Jade"


def test_load_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    corpus = load_corpus(path)
    assert all(corpus[s] == [] for s in ("train", "dev", "test"))


def test_load_missing_file(tmp_path):
    with pytest.raises(CorpusError, match="not found"):
        load_corpus(tmp_path / "nope.jsonl")


def test_load_malformed_line_reports_lineno(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "a"\n')
    with pytest.raises(CorpusError, match=":1:"):
        load_corpus(path)


def test_load_type_on_negative_utterance_rejected(tmp_path):
    line = {
        "id": "x", "split": "train",
        "utterances": [{"speaker": "A", "text": "hi", "persona": False,
                        "type": "likes", "value": "tea"}],
    }
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(line) + "\n")
    with pytest.raises(CorpusError, match="utterance 0"):
        load_corpus(path)


def test_load_duplicate_id_rejected(tmp_path, fixture_corpus_path):
    content = fixture_corpus_path.read_text().splitlines()[0]
    path = tmp_path / "dup.jsonl"
    path.write_text(content + "\n" + content + "\n")
    with pytest.raises(CorpusError, match="duplicate"):
        load_corpus(path)


def test_roundtrip(fixture_corpus, tmp_path):
    out = tmp_path / "copy.jsonl"
    save_corpus(fixture_corpus, out)
    again = load_corpus(out)
    assert again == fixture_corpus


def test_validate_clean_corpus(fixture_corpus):
    assert validate_annotations(fixture_corpus) == []


def test_validate_flags_type_missing():
    dlg = make_dialogue("v1", "train", [("A", "hello", None, None)])
    broken = Utterance(index=0, speaker_id="A", text="hello", has_persona=True)
    dlg = dlg.__class__(id="v1", split="train", utterances=(broken,))
    violations = validate_annotations({"train": [dlg]})
    assert [v.rule for v in violations] == ["type-missing"]


def test_validate_flags_empty_value():
    broken = Utterance(index=0, speaker_id="A", text="hello", has_persona=True,
                       persona_type=PersonaType.LIKES, persona_value="")
    dlg = make_dialogue("v2", "train", [("A", "x", None, None)])
    dlg = dlg.__class__(id="v2", split="train", utterances=(broken,))
    violations = validate_annotations({"train": [dlg]})
    assert [v.rule for v in violations] == ["empty-value"]


def test_stats_fixture_counts(fixture_corpus):
    stats = corpus_stats(fixture_corpus)
    train = stats.per_split["train"]
    assert (train.dialogues, train.utterances, train.persona_utterances) == (3, 12, 6)
    assert [train.per_type[t] for t in PersonaType.order()] == [2, 1, 1, 1, 1]
    test = stats.per_split["test"]
    assert (test.dialogues, test.utterances, test.persona_utterances) == (2, 8, 5)
    assert [test.per_type[t] for t in PersonaType.order()] == [1, 1, 1, 1, 1]


def test_stats_single_dialogue_two_likes():
    dlg = make_dialogue("s1", "train", [
        ("A", "i like tea", "likes", "tea"),
        ("B", "ok", None, None),
        ("A", "i like coffee too", "likes", "coffee"),
    ])
    stats = corpus_stats({"train": [dlg]})
    s = stats.per_split["train"]
    assert s.persona_utterances == 2
    assert s.per_type[PersonaType.LIKES] == 2
    assert sum(s.per_type.values()) == s.persona_utterances


def test_stats_per_type_sums_match(fixture_corpus):
    stats = corpus_stats(fixture_corpus)
    for split_stats in stats.per_split.values():
        assert sum(split_stats.per_type.values()) == split_stats.persona_utterances


def test_stats_absent_split_omitted(fixture_corpus):
    stats = corpus_stats({"train": fixture_corpus["train"]})
    assert set(stats.per_split) == {"train"}


def test_build_instances_contexts_are_prefixes(annotated_example_dialogue):
    instances = build_instances(annotated_example_dialogue)
    assert [i.target.index for i in instances] == [1, 2, 3]
    for inst in instances:
        assert [u.index for u in inst.context] == list(range(inst.target.index))
        assert inst.gold_type == inst.target.persona_type


def test_build_instances_from_prediction_indices(annotated_example_dialogue):
    instances = build_instances(annotated_example_dialogue, targets=[0, 2])
    assert [i.target.index for i in instances] == [0, 2]
    assert instances[0].gold_type is None
    assert instances[0].context == ()


def test_build_instances_out_of_range(annotated_example_dialogue):
    with pytest.raises(CorpusError, match="out of range"):
        build_instances(annotated_example_dialogue, targets=[99])
