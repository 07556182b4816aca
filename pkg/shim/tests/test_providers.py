from __future__ import annotations

import numpy as np
import pytest

from editshim.providers import (
    BadRequest,
    _caption_phrases,
    _instruction_target,
    decode_image,
    encode_image,
    procedural_chat,
    procedural_detect,
    procedural_embed,
    procedural_inpaint,
    procedural_segment,
    procedural_vqa,
)

# The pipeline parsers are the oracle for chat-reply shape: whatever the shim
# says must parse on the client side.
from editpipe.rerank import parse_entity_reply, parse_qa_pairs
from editpipe.evalharness import parse_tifa_reply
from editpipe.types import EditKind, Expected
from editpipe.verdict import build_verdict_prompt, parse_verdict


def _chat(messages) -> str:
    return procedural_chat({"messages": messages})["text"]


def _scene(color=(205, 40, 40)):
    img = np.zeros((72, 96, 3), dtype=np.uint8)
    for y in range(72):
        img[y, :, 0] = 60 + y // 2
        img[y, :, 1] = 90 + y // 3
        img[y, :, 2] = 130
    img[28:46, 36:62] = color
    return img


# -- vision providers -------------------------------------------------------------


def test_detect_finds_the_planted_object():
    body = {"image_b64": encode_image(_scene())}
    boxes = procedural_detect(body)["boxes"]
    assert boxes
    top = boxes[0]
    assert (top["x0"], top["y0"], top["x1"], top["y1"]) == (36.0, 28.0, 62.0, 46.0)
    assert 0.0 < top["confidence"] <= 0.95


def test_detect_blank_image_returns_no_boxes():
    body = {"image_b64": encode_image(np.full((32, 32, 3), 90, dtype=np.uint8))}
    assert procedural_detect(body)["boxes"] == []


def test_segment_marks_object_inside_box():
    scene = _scene()
    body = {
        "image_b64": encode_image(scene),
        "box": {"x0": 30, "y0": 22, "x1": 70, "y1": 52},
    }
    mask = decode_image(procedural_segment(body)["mask_b64"])
    assert mask.shape == (72, 96)
    assert mask[30, 40] == 255  # object pixel
    assert mask[5, 5] == 0  # background far outside the box


def test_segment_empty_window_falls_back_to_box_fill():
    scene = np.full((40, 40, 3), 90, dtype=np.uint8)
    body = {"image_b64": encode_image(scene), "box": {"x0": 4, "y0": 6, "x1": 14, "y1": 16}}
    mask = decode_image(procedural_segment(body)["mask_b64"])
    assert mask.sum() == 10 * 10 * 255


def test_inpaint_seeded_and_local():
    scene = _scene()
    mask = np.zeros((72, 96), dtype=np.uint8)
    mask[28:46, 36:62] = 255
    body = {
        "image_b64": encode_image(scene),
        "mask_b64": encode_image(mask),
        "seed": 9,
    }
    a = procedural_inpaint(body)["image_b64"]
    b = procedural_inpaint(body)["image_b64"]
    assert a == b
    out = decode_image(a)
    off = mask == 0
    assert np.array_equal(out[off], scene[off])
    assert (out[mask == 255] != scene[mask == 255]).any()


def test_inpaint_rejects_mismatched_mask():
    with pytest.raises(BadRequest):
        procedural_inpaint(
            {
                "image_b64": encode_image(_scene()),
                "mask_b64": encode_image(np.zeros((4, 4), dtype=np.uint8)),
                "seed": 0,
            }
        )


def test_vqa_color_questions_check_pixels():
    red_scene = encode_image(_scene((205, 40, 40)))
    assert procedural_vqa({"image_b64": red_scene, "question": "Is the cabin red?"})["answer"] == "yes"
    assert procedural_vqa({"image_b64": red_scene, "question": "Is the cabin purple?"})["answer"] == "no"


def test_vqa_presence_defaults_to_saliency():
    assert (
        procedural_vqa(
            {"image_b64": encode_image(_scene()), "question": "Is there a cabin?"}
        )["answer"]
        == "yes"
    )


def test_embed_unit_norm_and_similarity_ordering():
    a = np.asarray(procedural_embed({"image_b64": encode_image(_scene((205, 40, 40)))})["embedding"])
    a2 = np.asarray(procedural_embed({"image_b64": encode_image(_scene((200, 45, 45)))})["embedding"])
    b = np.asarray(procedural_embed({"image_b64": encode_image(255 - _scene())})["embedding"])
    assert abs(np.linalg.norm(a) - 1.0) < 1e-9
    assert float(a @ a2) > float(a @ b)


def test_embed_never_zero_vector():
    black = encode_image(np.zeros((16, 16, 3), dtype=np.uint8))
    vec = np.asarray(procedural_embed({"image_b64": black})["embedding"])
    assert np.linalg.norm(vec) > 0.0


# -- chat provider against the pipeline's parsers ------------------------------------


def test_chat_verdict_reply_parses_and_names_target():
    prompt = build_verdict_prompt("a red cabin on a grassy hill", "Add a tree")
    verdict = parse_verdict(_chat(prompt.messages()))
    assert verdict.possible is True
    assert verdict.entity == "tree"
    assert verdict.reasoning.startswith("The resulting image would show")


def test_chat_verdict_strips_verb_and_stops_at_preposition():
    assert _instruction_target("Replace the boat with a raft") == "boat"
    assert _instruction_target("Remove Aurora Borealis") == "Aurora Borealis"
    assert _instruction_target("Change the barn to a castle") == "barn"


def test_chat_entity_reply_parses_and_splits_phrases():
    prompt = [
        {"role": "user",
         "content": "List every noun phrase ...\n\nCaption: a red cabin on a grassy hill with a tree\n"},
    ]
    entities = parse_entity_reply(_chat(prompt))
    assert list(entities.entities) == ["red cabin", "grassy hill", "tree"]


def test_caption_phrase_splitter():
    assert _caption_phrases("a blue boat on calm water") == ["blue boat", "calm water"]
    assert _caption_phrases("an empty beach") == ["empty beach"]


def test_chat_question_reply_parses_with_remove_target():
    messages = [
        {"role": "system", "content": "Generate a question per entity ..."},
        {
            "role": "user",
            "content": (
                "Caption: an empty beach\n"
                "Entities: empty beach\n"
                "Instruction: Remove the umbrella"
            ),
        },
    ]
    pairs = parse_qa_pairs(
        _chat(messages), ["empty beach"], EditKind.REMOVE, remove_target="umbrella"
    )
    by_entity = {p.entity: p for p in pairs}
    assert by_entity["empty beach"].expected is Expected.YES
    assert by_entity["umbrella"].expected is Expected.NO
    assert "umbrella" in by_entity["umbrella"].question


def test_chat_tifa_reply_parses_to_seven_or_more():
    messages = [
        {"role": "user",
         "content": "Write ... multiple-choice question-answer tuples ...\n\nCaption: a red cabin on a grassy hill"},
    ]
    questions = parse_tifa_reply(_chat(messages))
    assert len(questions) >= 7
    assert any("red" in q.question.lower() or "color" in q.question.lower() for q in questions)


def test_chat_unknown_prompt_gets_generic_reply():
    assert _chat([{"role": "user", "content": "Reply with the word ready."}]) == "ready"
