from __future__ import annotations

import json
import random

import pytest

from editpipe.manifest import load_manifest
from editpipe.types import EditKind, Stage, Verdict
from editpipe.verdict import (
    InconsistentVerdict,
    MissingVerdictField,
    NoJsonFound,
    VerdictParseError,
    build_verdict_prompt,
    classify_edit_kind,
    leading_verb,
    load_verdict_exemplars,
    parse_verdict,
    run_verdict_stage,
)
from pipeline_fixture import scripted_backend, write_raw_manifest


# -- prompt structure --------------------------------------------------------


def test_prompt_first_exemplar_is_the_barn_castle_case():
    prompt = build_verdict_prompt("Barn In Autumn Smoky Mountains by David Chasey", "Change the barn to a castle")
    first = prompt.exemplars[0]
    assert first.caption == "Barn In Autumn Smoky Mountains by David Chasey"
    assert json.loads(first.rendered_answer().splitlines()[-1]) == {
        "verdict": "true",
        "entity": "barn",
    }


def test_prompt_second_exemplar_is_the_infeasible_bridge_case():
    prompt = build_verdict_prompt("any caption", "any instruction")
    second = prompt.exemplars[1]
    assert second.instruction == "change the bridge to a wooden ship"
    assert json.loads(second.rendered_answer().splitlines()[-1]) == {
        "verdict": "false",
        "entity": "none",
    }


def test_prompt_ships_five_exemplars_with_template_opener():
    exemplars = load_verdict_exemplars()
    assert len(exemplars) == 5
    for ex in exemplars:
        assert ex.reasoning.startswith("The resulting image would show")


def test_query_appears_exactly_once_after_all_exemplars():
    prompt = build_verdict_prompt("A very unique caption xyzzy", "Add a plover")
    user = prompt.messages()[1]["content"]
    query = "Caption: A very unique caption xyzzy\nInstruction: Add a plover"
    assert user.count(query) == 1
    assert user.rstrip().endswith(query)
    for ex in prompt.exemplars:
        assert user.index(f"Caption: {ex.caption}") < user.index(query)


def test_prompt_rejects_empty_inputs():
    with pytest.raises(ValueError):
        build_verdict_prompt("", "Add a thing")


# -- parse_verdict ------------------------------------------------------------


def test_parse_reasoning_then_json():
    text = 'The resulting image would show a castle on a hill.\n{"verdict": "true", "entity": "barn"}'
    v = parse_verdict(text)
    assert v.possible is True
    assert v.entity == "barn"
    assert v.reasoning == "The resulting image would show a castle on a hill."


def test_parse_false_verdict_entity_absent():
    v = parse_verdict('{"verdict": "false", "entity": "none"}')
    assert v.possible is False
    assert v.entity is None


def test_parse_uppercase_true_with_empty_entity_is_inconsistent():
    with pytest.raises(InconsistentVerdict):
        parse_verdict('{"verdict": "TRUE", "entity": ""}')


def test_parse_boolean_verdict_accepted():
    v = parse_verdict('{"verdict": true, "entity": "sky"}')
    assert v.possible is True and v.entity == "sky"


def test_parse_takes_last_top_level_object():
    text = (
        'First attempt {"verdict": "true", "entity": "boat"} then corrected:\n'
        '{"verdict": "false", "entity": "none"}'
    )
    v = parse_verdict(text)
    assert v.possible is False


def test_parse_nested_object_not_mistaken_for_reply():
    text = '{"verdict": "true", "entity": "barn", "meta": {"step": 1}}'
    v = parse_verdict(text)
    assert v.entity == "barn"


def test_parse_no_json_found():
    with pytest.raises(NoJsonFound):
        parse_verdict("The resulting image would show nothing structured at all.")


def test_parse_missing_verdict_field():
    with pytest.raises(MissingVerdictField):
        parse_verdict('{"entity": "barn"}')
    with pytest.raises(MissingVerdictField):
        parse_verdict('{"verdict": "perhaps", "entity": "barn"}')


def test_first_two_shipped_exemplars_round_trip_exactly():
    for ex in load_verdict_exemplars()[:2]:
        v = parse_verdict(ex.rendered_answer())
        assert v.reasoning == ex.reasoning
        expected_possible = ex.verdict == "true"
        assert v.possible is expected_possible
        assert v.entity == (ex.entity if expected_possible else None)


def test_fuzzed_replies_never_violate_verdict_invariants():
    rng = random.Random(20240917)
    fragments = [
        "The resulting image would show ",
        "a castle", "{", "}", '"verdict"', '"entity"', ":", ",", " ",
        '"true"', '"false"', '"TRUE"', "true", "false", '"none"', '""',
        '"barn"', "null", "42", "[1, 2]", "\n", "not json at all",
        '{"verdict": "true"}', '{"verdict": "true", "entity": "sky"}',
        '{"entity": "sky"}', '{"verdict": "maybe", "entity": "sky"}',
    ]
    for _ in range(1000):
        text = "".join(rng.choice(fragments) for _ in range(rng.randint(1, 12)))
        try:
            verdict = parse_verdict(text)
        except VerdictParseError:
            continue
        assert isinstance(verdict, Verdict)
        if verdict.possible:
            assert verdict.entity and verdict.entity.lower() != "none"
        else:
            assert verdict.entity is None


# -- classify_edit_kind -----------------------------------------------------------


@pytest.mark.parametrize(
    "instruction,kind",
    [
        ("Remove Aurora Borealis", EditKind.REMOVE),
        ("Add a lighthouse", EditKind.OTHER),
        ("  delete the car ", EditKind.REMOVE),
        ("Erase the crowd", EditKind.REMOVE),
        ("take away the fence", EditKind.REMOVE),
        ("Removed scenery restored", EditKind.OTHER),  # prefix but not the verb
        ("Turn the cat into a dog", EditKind.OTHER),
    ],
)
def test_classify_edit_kind(instruction, kind):
    assert classify_edit_kind(instruction) == kind


def test_leading_verb_tokenizer():
    assert leading_verb("Replace the roof.") == "replace"
    assert leading_verb("  swap, the cup") == "swap"
    assert leading_verb("") == ""


# -- run_verdict_stage -------------------------------------------------------------


def test_stage_records_sky_entity_and_filters(tmp_path):
    raw = write_raw_manifest(tmp_path)
    backend = scripted_backend()
    from editpipe.gateway import BackendConfig, Gateway

    gateway = Gateway(backend, BackendConfig(), sleep=lambda _: None)
    manifest = load_manifest(raw)
    out = run_verdict_stage(manifest, gateway)

    aurora = out.by_id("rec-aurora")
    assert aurora.verdict.entity == "sky"
    assert aurora.stage is Stage.VERDICTED
    assert aurora.edit_kind is EditKind.OTHER

    remove = out.by_id("rec-remove")
    assert remove.edit_kind is EditKind.REMOVE

    nonsense = out.by_id("rec-nonsense")
    assert not nonsense.alive
    assert nonsense.rejection.reason == "infeasible"
    assert nonsense.stage is Stage.RAW


def test_stage_counts_and_immutability(tmp_path):
    raw = write_raw_manifest(tmp_path)
    backend = scripted_backend()
    from editpipe.gateway import BackendConfig, Gateway

    gateway = Gateway(backend, BackendConfig(), sleep=lambda _: None)
    manifest = load_manifest(raw)
    out = run_verdict_stage(manifest, gateway)
    survivors = [r for r in out.records if r.alive]
    rejected = [r for r in out.records if not r.alive]
    assert len(survivors) + len(rejected) == len(manifest)
    assert len(survivors) == 4 and len(rejected) == 1
    for before, after in zip(manifest.records, out.records):
        assert before.caption == after.caption
        assert before.instruction == after.instruction
        assert before.verdict is None  # input manifest untouched


def test_unparseable_reply_rejected_after_one_retry(tmp_path):
    raw = write_raw_manifest(tmp_path)
    backend = scripted_backend()
    backend.chat_script = [
        s
        for s in backend.chat_script
        if "Caption: Buttermere Lake District\nInstruction: Add an aurora borealis"
        not in s.needles
    ]
    backend.script_chat(
        "no json here at all",
        "You will be given an input caption",
        "Caption: Buttermere Lake District\nInstruction: Add an aurora borealis",
    )
    from editpipe.gateway import BackendConfig, Gateway

    gateway = Gateway(backend, BackendConfig(), sleep=lambda _: None)
    out = run_verdict_stage(load_manifest(raw), gateway)
    rec = out.by_id("rec-aurora")
    assert not rec.alive
    assert rec.rejection.reason == "unparseable"


def test_backend_failure_rejects_record_not_run(tmp_path):
    raw = write_raw_manifest(tmp_path)
    backend = scripted_backend()
    backend.inject_failures("chat", 20)  # exhaust retries for the first record only
    from editpipe.gateway import BackendConfig, Gateway

    gateway = Gateway(
        backend, BackendConfig(max_retries=1, backoff=0.01), sleep=lambda _: None
    )
    out = run_verdict_stage(load_manifest(raw), gateway)
    reasons = {r.id: (r.rejection.reason if r.rejection else None) for r in out.records}
    assert "backend" in reasons.values()
