import json

import pytest

from speaker_profiler.corpus import PersonaType
from speaker_profiler.pipeline import (
    MISSED,
    EvalReport,
    StageOutputs,
    Stages,
    assemble_profiles,
    emit_report,
    oracle_discovery,
    oracle_typeid,
    oracle_valueex,
    render_report_text,
    run_pipeline,
    run_standalone,
)
from conftest import make_dialogue


def gold_stages() -> Stages:
    return Stages(
        discovery=oracle_discovery(),
        typeid=oracle_typeid(),
        valueex=oracle_valueex(),
    )


def outputs_from_gold(dialogue) -> StageOutputs:
    flags = [u.has_persona for u in dialogue.utterances]
    valued = [
        (u.index, u.persona_type, u.persona_value)
        for u in dialogue.utterances if u.has_persona
    ]
    return StageOutputs(
        dialogue_id=dialogue.id,
        discovery_flags=flags,
        discovery_probs=[1.0 if f else 0.0 for f in flags],
        typed=[(i, t) for i, t, _ in valued],
        valued=valued,
        gold_fed_stage2=True,
        gold_fed_stage3=True,
    )


# -- profile assembly ---------------------------------------------------------

def test_assemble_profiles_annotated_example(annotated_example_dialogue):
    dlg = annotated_example_dialogue
    profiles = assemble_profiles(dlg, outputs_from_gold(dlg))
    assert [p.speaker_id for p in profiles] == ["Jade", "Chandler"]
    jade = profiles[0]
    assert jade.entries == (
        (PersonaType.OCCUPATION, "Teaches aerobics", 1),
        (PersonaType.TRAIT, "Boastful", 2),
    )
    chandler = profiles[1]
    assert chandler.entries == ((PersonaType.LIKES, "Jade", 3),)


def test_assemble_profiles_json_shape(annotated_example_dialogue):
    dlg = annotated_example_dialogue
    profiles = assemble_profiles(dlg, outputs_from_gold(dlg))
    obj = profiles[0].to_json()
    assert obj["speaker"] == "Jade"
    assert obj["entries"][0] == {
        "type": "occupation", "value": "Teaches aerobics", "evidence_index": 1,
    }


def test_assemble_profiles_empty_predictions(annotated_example_dialogue):
    dlg = annotated_example_dialogue
    outputs = outputs_from_gold(dlg)
    outputs.valued = []
    assert assemble_profiles(dlg, outputs) == []


def test_assemble_profiles_entries_sorted_by_evidence(annotated_example_dialogue):
    dlg = annotated_example_dialogue
    outputs = outputs_from_gold(dlg)
    outputs.valued = list(reversed(outputs.valued))
    profiles = assemble_profiles(dlg, outputs)
    for profile in profiles:
        indices = [i for _, _, i in profile.entries]
        assert indices == sorted(indices)


def test_assemble_profiles_dangling_index(annotated_example_dialogue):
    dlg = annotated_example_dialogue
    outputs = outputs_from_gold(dlg)
    outputs.valued = [(99, PersonaType.MISC, "x")]
    with pytest.raises(ValueError, match="dangling"):
        assemble_profiles(dlg, outputs)


def test_assemble_profiles_dialogue_mismatch(annotated_example_dialogue):
    dlg = annotated_example_dialogue
    outputs = outputs_from_gold(dlg)
    outputs.dialogue_id = "someone-else"
    with pytest.raises(ValueError, match="someone-else"):
        assemble_profiles(dlg, outputs)


# -- evaluation ----------------------------------------------------------------

def test_gold_oracles_score_perfectly(fixture_corpus):
    report = run_standalone(fixture_corpus, gold_stages())
    assert report.stage1.positive == (1.0, 1.0, 1.0)
    assert report.stage2.weighted_f1 == pytest.approx(1.0)
    assert report.stage2_missed == 0
    assert report.stage3.rouge1 == pytest.approx(1.0)
    assert report.stage3.bleu1 == pytest.approx(1.0)
    assert report.false_positives == []
    assert report.false_negatives == []
    assert report.type_errors == []


def test_oracle_pipeline_equals_standalone_bitwise(fixture_corpus):
    standalone = run_standalone(fixture_corpus, gold_stages())
    pipeline = run_pipeline(fixture_corpus, gold_stages())
    a = json.dumps(standalone.results_json(), sort_keys=True).encode()
    b = json.dumps(pipeline.results_json(), sort_keys=True).encode()
    assert a == b
    assert standalone.mode == "standalone" and pipeline.mode == "pipeline"


def test_all_negative_stage1_marks_everything_missed(fixture_corpus):
    stages = Stages(
        discovery=lambda dlg: ([False] * len(dlg.utterances),
                               [0.0] * len(dlg.utterances)),
        typeid=oracle_typeid(),
        valueex=oracle_valueex(),
    )
    report = run_pipeline(fixture_corpus, stages)
    assert report.stage1.positive == (0.0, 0.0, 0.0)
    gold_positive = sum(
        u.has_persona for d in fixture_corpus["test"] for u in d.utterances
    )
    assert report.stage2_missed == gold_positive
    assert report.stage2.weighted_f1 == 0.0
    assert report.stage3.rouge1 == 0.0
    assert all(e["predicted"] == MISSED for e in report.type_errors)
    assert report.stage2_confusion.total() == 0


def test_pipeline_stage2_only_sees_stage1_positives(fixture_corpus):
    # a discovery stub that flags exactly one utterance per dialogue
    def one_flag(dlg):
        flags = [False] * len(dlg.utterances)
        flags[0] = True
        return flags, [1.0] + [0.0] * (len(dlg.utterances) - 1)

    seen = []

    def spy_typeid(instances):
        seen.extend(instances)
        return [PersonaType.MISC] * len(instances)

    stages = Stages(discovery=one_flag, typeid=spy_typeid, valueex=oracle_valueex())
    report = run_pipeline(fixture_corpus, stages)
    assert all(inst.target.index == 0 for inst in seen)
    assert len(seen) == len(fixture_corpus["test"])
    for out in report.stage_outputs:
        flagged = {i for i, f in enumerate(out.discovery_flags) if f}
        assert {i for i, _ in out.typed} <= flagged


def test_standalone_stage2_sees_all_gold_positives(fixture_corpus):
    seen = []

    def spy_typeid(instances):
        seen.extend(instances)
        return [inst.gold_type for inst in instances]

    stages = Stages(
        discovery=lambda dlg: ([False] * len(dlg.utterances),
                               [0.0] * len(dlg.utterances)),
        typeid=spy_typeid,
        valueex=oracle_valueex(),
    )
    report = run_standalone(fixture_corpus, stages)
    gold_positive = sum(
        u.has_persona for d in fixture_corpus["test"] for u in d.utterances
    )
    assert len(seen) == gold_positive
    # stage 1 failed but downstream stages are unaffected in standalone mode
    assert report.stage2.weighted_f1 == pytest.approx(1.0)
    assert report.stage3.rouge1 == pytest.approx(1.0)


def test_evaluate_empty_split_rejected(fixture_corpus):
    with pytest.raises(ValueError, match="empty"):
        run_standalone({"test": []}, gold_stages())


def test_stage_output_length_mismatch_detected(fixture_corpus):
    stages = Stages(
        discovery=lambda dlg: ([True], [1.0]),
        typeid=oracle_typeid(),
        valueex=oracle_valueex(),
    )
    with pytest.raises(ValueError, match="stage 1"):
        run_standalone(fixture_corpus, stages)


def test_error_exemplars_carry_verbatim_text(fixture_corpus):
    # flag everything: every gold-negative becomes a false positive
    stages = Stages(
        discovery=lambda dlg: ([True] * len(dlg.utterances),
                               [1.0] * len(dlg.utterances)),
        typeid=oracle_typeid(),
        valueex=oracle_valueex(),
    )
    report = run_pipeline(fixture_corpus, stages)
    negatives = {
        (d.id, u.index, u.text)
        for d in fixture_corpus["test"] for u in d.utterances if not u.has_persona
    }
    recorded = {(e["dialogue"], e["index"], e["text"]) for e in report.false_positives}
    assert recorded == negatives
    assert report.false_negatives == []


# -- reports -----------------------------------------------------------------------

def test_report_json_roundtrip(fixture_corpus, tmp_path):
    report = run_standalone(fixture_corpus, gold_stages(),
                            config_snapshot={"split": "test"})
    json_path, text_path = emit_report(report, tmp_path / "eval")
    assert json_path.name == "eval.json" and text_path.name == "eval.txt"
    obj = json.loads(json_path.read_text())
    assert obj["mode"] == "standalone"
    assert obj["config"] == {"split": "test"}
    again = EvalReport.from_json(obj)
    assert json.dumps(again.results_json(), sort_keys=True) == \
        json.dumps(report.results_json(), sort_keys=True)


def test_report_emission_deterministic(fixture_corpus, tmp_path):
    report = run_standalone(fixture_corpus, gold_stages())
    p1, _ = emit_report(report, tmp_path / "a")
    p2, _ = emit_report(report, tmp_path / "b")
    assert p1.read_bytes() == p2.read_bytes()


def test_text_report_mentions_measured_and_reference(fixture_corpus):
    report = run_standalone(fixture_corpus, gold_stages())
    text = render_report_text(report)
    assert "mode: standalone" in text
    assert "reference" in text
    for t in PersonaType.order():
        assert t.value in text
    assert "none" in text  # empty exemplar sections


def test_text_report_lists_error_exemplars(fixture_corpus):
    stages = Stages(
        discovery=lambda dlg: ([True] * len(dlg.utterances),
                               [1.0] * len(dlg.utterances)),
        typeid=lambda insts: [PersonaType.MISC] * len(insts),
        valueex=oracle_valueex(),
    )
    report = run_pipeline(fixture_corpus, stages)
    text = render_report_text(report)
    some_fp = report.false_positives[0]
    assert some_fp["text"] in text
    some_err = report.type_errors[0]
    assert some_err["predicted"] == "misc"
    assert f"true={some_err['true']} predicted=misc" in text
