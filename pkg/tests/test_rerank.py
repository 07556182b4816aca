from __future__ import annotations

import itertools
import json
import random

import numpy as np
import pytest

from editpipe import images
from editpipe.gateway import BackendConfig, Gateway
from editpipe.grounding import run_ground_stage
from editpipe.manifest import load_manifest
from editpipe.mocks import MockBackend
from editpipe.rerank import (
    EntityExtractionError,
    QAParseError,
    build_qa_prompt,
    extract_entities,
    generate_candidates,
    normalize_answer,
    parse_entity_reply,
    parse_qa_pairs,
    run_inpaint_stage,
    run_rerank_stage,
    score_candidate,
    select_best,
)
from editpipe.types import EditKind, Expected, Mask, QAPair, Stage
from editpipe.verdict import run_verdict_stage
from pipeline_fixture import scripted_backend, write_raw_manifest


def _image(seed=0, w=32, h=24):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(h, w, 3), dtype=np.int64).astype(np.uint8)


def _gateway(backend):
    return Gateway(backend, BackendConfig(), sleep=lambda _: None)


# -- entity extraction ---------------------------------------------------------


def test_entity_reply_drops_locations_and_names():
    reply = json.dumps(
        [
            {"entity": "Buttermere", "type": "Location"},
            {"entity": "Lake District", "type": "Object"},
            {"entity": "Aurora Borealis", "type": "Object"},
        ]
    )
    result = parse_entity_reply(reply)
    assert list(result.entities) == ["Lake District", "Aurora Borealis"]
    assert [(d.entity, d.reason) for d in result.dropped] == [("Buttermere", "Location")]


def test_entity_reply_dedupes_keeping_first():
    reply = json.dumps(
        [
            {"entity": "Lake", "type": "Object"},
            {"entity": "lake", "type": "Object"},
            {"entity": "Boat", "type": "Object"},
        ]
    )
    result = parse_entity_reply(reply)
    assert list(result.entities) == ["Lake", "Boat"]


def test_entity_extraction_retries_once_then_fails(backend):
    backend.script_chat("still not a list", "List every noun phrase")
    gateway = _gateway(backend)
    with pytest.raises(EntityExtractionError):
        extract_entities("some caption", gateway)
    assert backend.calls["chat"] == 2


def test_person_names_dropped():
    reply = json.dumps(
        [
            {"entity": "Marie Curie", "type": "PersonName"},
            {"entity": "laboratory", "type": "Object"},
        ]
    )
    result = parse_entity_reply(reply)
    assert list(result.entities) == ["laboratory"]
    assert result.dropped[0].reason == "PersonName"


# -- QA prompt ---------------------------------------------------------------


def test_qa_prompt_two_entities_non_remove():
    messages = build_qa_prompt(
        "Buttermere Lake District with Aurora Borealis",
        ["Lake District", "Aurora Borealis"],
        "Add an aurora borealis",
        EditKind.OTHER,
    )
    user = messages[1]["content"]
    assert "Entities: Lake District, Aurora Borealis" in user
    assert "Instruction: Add an aurora borealis" not in user  # only remove edits
    assert user.count("Answer: Yes") >= 3  # exemplar answers


def test_qa_prompt_remove_appends_instruction():
    messages = build_qa_prompt(
        "Buttermere Lake District",
        ["Lake District"],
        "Remove Aurora Borealis",
        EditKind.REMOVE,
    )
    user = messages[1]["content"]
    assert user.rstrip().endswith(
        "Caption: Buttermere Lake District\n"
        "Entities: Lake District\n"
        "Instruction: Remove Aurora Borealis"
    )


def test_qa_prompt_exemplar_block_before_query():
    messages = build_qa_prompt("zebra on a plain", ["Zebra"], "Add a zebra", EditKind.OTHER)
    user = messages[1]["content"]
    assert user.index("handsome man wearing a tuxedo") < user.index("zebra on a plain")


def test_qa_prompt_tuxedo_exemplar_present():
    messages = build_qa_prompt("anything", ["thing"], "Add a thing", EditKind.OTHER)
    assert "Is the man wearing a tuxedo and a top hat?" in messages[1]["content"]


# -- QA parsing -----------------------------------------------------------------


def test_parse_qa_pairs_remove_forces_expected_answers():
    reply = (
        "Entity: Lake District\n"
        "Question: Is there a lake district in the picture?\n"
        "Answer: Yes\n"
        "Entity: Aurora Borealis\n"
        "Question: Does the picture contain Aurora Borealis?\n"
        "Answer: Yes\n"  # wrong in the reply; must be overridden to No
    )
    pairs = parse_qa_pairs(
        reply, ["Lake District"], EditKind.REMOVE, remove_target="Aurora Borealis"
    )
    assert [(p.question, p.expected) for p in pairs] == [
        ("Is there a lake district in the picture?", Expected.YES),
        ("Does the picture contain Aurora Borealis?", Expected.NO),
    ]


def test_parse_qa_pairs_drops_unknown_entity():
    reply = (
        "Entity: Lake District\n"
        "Question: Is there a lake district in the picture?\n"
        "Answer: Yes\n"
        "Entity: Dragon\n"
        "Question: Is there a dragon?\n"
        "Answer: Yes\n"
    )
    pairs = parse_qa_pairs(reply, ["Lake District"], EditKind.OTHER)
    assert len(pairs) == 1
    assert pairs[0].entity == "Lake District"


def test_parse_qa_pairs_empty_reply_errors():
    with pytest.raises(QAParseError):
        parse_qa_pairs("nothing useful", ["Lake District"], EditKind.OTHER)


# -- answer normalization ----------------------------------------------------------


@pytest.mark.parametrize(
    "text,expected",
    [
        ("yes", Expected.YES),
        ("Yes.", Expected.YES),
        ("  YEAH ", Expected.YES),
        ("yep", Expected.YES),
        ("true", Expected.YES),
        ("no", Expected.NO),
        ("Nope!", Expected.NO),
        ("false", Expected.NO),
        ("maybe", None),
        ("yes there is", None),
        ("", None),
    ],
)
def test_normalize_answer_table(text, expected):
    assert normalize_answer(text) == expected


def test_normalize_answer_idempotent():
    for text in ("yes", "Yes.", "No!!", "maybe", "YEAH"):
        first = normalize_answer(text)
        if first is not None:
            assert normalize_answer(first.value) == first


# -- candidates ---------------------------------------------------------------------


def test_generate_candidates_seed_schedule(tmp_path, backend):
    seeds = []

    def spy_handler(body):
        seeds.append(body["seed"])
        image = images.from_b64_png(body["image_b64"])
        return {"image_b64": images.b64_png(image)}

    backend.inpaint_handler = spy_handler
    gateway = _gateway(backend)
    img = _image()
    mask = Mask(width=32, height=24, bits=np.ones((24, 32), dtype=np.uint8))
    refs = generate_candidates(
        img, mask, "caption", "rec-x", tmp_path, gateway, k=3, base_seed=100
    )
    assert seeds == [100, 101, 102]
    assert [r.path for r in refs] == [
        "rec-x.cand0.png",
        "rec-x.cand1.png",
        "rec-x.cand2.png",
    ]


def test_generate_candidates_k1_trivial_selection(tmp_path, backend):
    gateway = _gateway(backend)
    img = _image()
    mask = Mask(width=32, height=24, bits=np.ones((24, 32), dtype=np.uint8))
    refs = generate_candidates(img, mask, "caption", "rec-y", tmp_path, gateway, k=1)
    assert len(refs) == 1
    assert select_best([5]) == 0


def test_generate_candidates_cached_rerun_no_new_calls(tmp_path, backend):
    gateway = _gateway(backend)
    img = _image()
    mask = Mask(width=32, height=24, bits=np.ones((24, 32), dtype=np.uint8))
    generate_candidates(img, mask, "caption", "rec-z", tmp_path, gateway, k=3)
    first = backend.calls["inpaint"]
    generate_candidates(img, mask, "caption", "rec-z", tmp_path, gateway, k=3)
    assert backend.calls["inpaint"] == first


# -- scoring and selection -------------------------------------------------------------


def _qa(*entries) -> list[QAPair]:
    return [
        QAPair(entity=f"e{i}", question=q, expected=e) for i, (q, e) in enumerate(entries)
    ]


def test_score_candidate_counts_correct_answers(backend):
    gateway = _gateway(backend)
    img = _image()
    backend.script_vqa("q1?", "yes")
    backend.script_vqa("q2?", "no")
    pairs = _qa(("q1?", Expected.YES), ("q2?", Expected.NO))
    assert score_candidate(img, pairs, gateway) == 2


def test_score_candidate_normalization_and_unknown(backend):
    gateway = _gateway(backend)
    img = _image()
    backend.script_vqa("q1?", "Yes.")
    backend.script_vqa("q2?", "maybe")
    pairs = _qa(("q1?", Expected.YES), ("q2?", Expected.NO))
    assert score_candidate(img, pairs, gateway) == 1


def test_score_candidate_requires_questions(backend):
    with pytest.raises(ValueError):
        score_candidate(_image(), [], _gateway(backend))


@pytest.mark.parametrize("scores,winner", [([2, 3, 1], 1), ([2, 2, 2], 0), ([5], 0)])
def test_select_best(scores, winner):
    assert select_best(scores) == winner


def test_selection_matches_bruteforce_enumeration():
    """Every configuration of <= 4 candidates x <= 6 questions over scripted answers."""
    rng = random.Random(99)
    for n_cands in range(1, 5):
        for n_questions in range(1, 7):
            for _ in range(8):
                answers = [
                    [rng.choice(["yes", "no", "maybe"]) for _ in range(n_questions)]
                    for _ in range(n_cands)
                ]
                expected = [rng.choice([Expected.YES, Expected.NO]) for _ in range(n_questions)]

                backend = MockBackend()
                gateway = _gateway(backend)
                candidate_images = [_image(seed=100 + c) for c in range(n_cands)]
                pairs = [
                    QAPair(entity=f"e{q}", question=f"question {q}?", expected=expected[q])
                    for q in range(n_questions)
                ]
                for c, img in enumerate(candidate_images):
                    digest = backend.image_digest(img)
                    for q in range(n_questions):
                        backend.script_vqa(f"{digest}:question {q}?", answers[c][q])

                scores = [score_candidate(img, pairs, gateway) for img in candidate_images]

                # Independent enumeration of correct-answer counts.
                brute = []
                for c in range(n_cands):
                    count = 0
                    for q in range(n_questions):
                        norm = {"yes": Expected.YES, "no": Expected.NO}.get(answers[c][q])
                        if norm == expected[q]:
                            count += 1
                    brute.append(count)
                assert scores == brute
                best = select_best(scores)
                assert scores[best] == max(brute)
                assert all(scores[i] < scores[best] for i in range(best))


def test_monotonicity_appending_always_correct_question(backend):
    gateway = _gateway(backend)
    imgs = [_image(seed=i) for i in range(3)]
    base_pairs = _qa(("q1?", Expected.YES), ("q2?", Expected.NO))
    backend.script_vqa("q1?", "yes")
    backend.script_vqa("q2?", "yes")
    extra = QAPair(entity="all", question="q3?", expected=Expected.YES)
    backend.script_vqa("q3?", "yes")
    before = [score_candidate(img, base_pairs, gateway) for img in imgs]
    after = [score_candidate(img, base_pairs + [extra], gateway) for img in imgs]
    assert after == [s + 1 for s in before]
    assert select_best(before) == select_best(after)


def test_permutation_equivariance(backend):
    gateway = _gateway(backend)
    imgs = [_image(seed=i) for i in range(4)]
    pairs = _qa(("q1?", Expected.YES), ("q2?", Expected.YES), ("q3?", Expected.NO))
    for idx, img in enumerate(imgs):
        digest = backend.image_digest(img)
        backend.script_vqa(f"{digest}:q1?", "yes" if idx % 2 == 0 else "no")
        backend.script_vqa(f"{digest}:q2?", "yes" if idx < 2 else "no")
        backend.script_vqa(f"{digest}:q3?", "no")
    scores = [score_candidate(img, pairs, gateway) for img in imgs]
    best_digest = backend.image_digest(imgs[select_best(scores)])
    for perm in itertools.permutations(range(4)):
        permuted = [imgs[i] for i in perm]
        p_scores = [score_candidate(img, pairs, gateway) for img in permuted]
        assert p_scores == [scores[i] for i in perm]
        assert backend.image_digest(permuted[select_best(p_scores)]) == best_digest


# -- full stage -----------------------------------------------------------------------


def _run_until_selected(tmp_path):
    raw = write_raw_manifest(tmp_path)
    backend = scripted_backend()
    gateway = _gateway(backend)
    m = run_verdict_stage(load_manifest(raw), gateway)
    m = run_ground_stage(m, gateway)
    m = run_inpaint_stage(m, gateway, k=3, base_seed=100)
    m = run_rerank_stage(m, gateway)
    return m, backend, gateway


def test_full_rerank_stage_selects_candidates(tmp_path):
    m, backend, gateway = _run_until_selected(tmp_path)
    for rec_id in ("rec-aurora", "rec-barn", "rec-remove"):
        rec = m.by_id(rec_id)
        assert rec.stage is Stage.SELECTED
        assert len(rec.candidates) == 3
        assert len(rec.scores) == 3
        assert rec.scores[rec.selected] == max(rec.scores)
    remove = m.by_id("rec-remove")
    assert [p.expected for p in remove.qa_pairs] == [Expected.YES, Expected.NO]


def test_full_stage_rerun_is_deterministic(tmp_path):
    m1, _, gateway = _run_until_selected(tmp_path)
    backend2 = scripted_backend()
    gateway2 = _gateway(backend2)
    raw = load_manifest(tmp_path / "raw.jsonl")
    n1 = run_verdict_stage(raw, gateway2)
    n1 = run_ground_stage(n1, gateway2)
    n1 = run_inpaint_stage(n1, gateway2, k=3, base_seed=100)
    n1 = run_rerank_stage(n1, gateway2)
    from editpipe.manifest import record_to_wire

    assert [record_to_wire(r) for r in m1.records] == [record_to_wire(r) for r in n1.records]
