"""Candidate generation and faithfulness re-ranking.

For each grounded record we inpaint K candidates under a deterministic seed
schedule, generate one yes/no question per surviving caption entity (plus an
absence question for remove instructions), answer them with the VQA backend,
and keep the candidate with the most correct answers. Expected answers are
derived from the edit kind, never trusted from the LLM reply.
"""

from __future__ import annotations

import json
import logging
import string
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import images
from .gateway import Gateway, GatewayError, Guidance
from .manifest import Manifest
from .types import EditKind, Expected, ImageRef, Mask, QAPair, Stage

log = logging.getLogger(__name__)

DEFAULT_K = 3

REASON_ENTITY_EXTRACTION = "entity_extraction"
REASON_QA_GENERATION = "qa_generation"
REASON_INPAINT = "inpaint"
REASON_VQA = "vqa"

_DROP_TYPES = {"location": "Location", "personname": "PersonName"}

_YES_WORDS = {"yes", "yeah", "yep", "true"}
_NO_WORDS = {"no", "nope", "false"}


class EntityExtractionError(Exception):
    pass


class QAParseError(Exception):
    pass


@dataclass(frozen=True)
class DroppedEntity:
    entity: str
    reason: str


@dataclass(frozen=True)
class EntityList:
    entities: tuple[str, ...]
    dropped: tuple[DroppedEntity, ...] = ()


def _iter_json_arrays(text: str):
    decoder = json.JSONDecoder()
    pos = 0
    while True:
        start = text.find("[", pos)
        if start == -1:
            return
        try:
            obj, end = decoder.raw_decode(text[start:])
        except json.JSONDecodeError:
            pos = start + 1
            continue
        if isinstance(obj, list):
            yield obj
            pos = start + end
        else:
            pos = start + 1


def parse_entity_reply(llm_text: str) -> EntityList:
    """Parse the last JSON array of {entity, type} tags; drop locations and names."""
    last = None
    for arr in _iter_json_arrays(llm_text):
        last = arr
    if last is None:
        raise EntityExtractionError("reply contains no JSON array")
    kept: list[str] = []
    dropped: list[DroppedEntity] = []
    seen: set[str] = set()
    for item in last:
        if not isinstance(item, dict) or "entity" not in item:
            raise EntityExtractionError(f"malformed entity entry {item!r}")
        name = str(item["entity"]).strip()
        if not name:
            continue
        key = name.lower()
        if key in seen:
            continue
        seen.add(key)
        kind = str(item.get("type", "Object")).strip().lower()
        if kind in _DROP_TYPES:
            dropped.append(DroppedEntity(entity=name, reason=_DROP_TYPES[kind]))
        else:
            kept.append(name)
    return EntityList(entities=tuple(kept), dropped=tuple(dropped))


def _load_asset(name: str) -> str:
    return resources.files("editpipe.prompts").joinpath(name).read_text(encoding="utf-8")


def extract_entities(edited_caption: str, gateway: Gateway) -> EntityList:
    """LLM-backed noun-phrase extraction with one salted retry on bad replies."""
    if not edited_caption:
        raise ValueError("edited_caption must be non-empty")
    prompt = _load_asset("entity_extraction.txt").replace("{caption}", edited_caption)
    messages = [{"role": "user", "content": prompt}]
    text = gateway.chat(messages, temperature=0.0)
    try:
        return parse_entity_reply(text)
    except EntityExtractionError:
        text = gateway.chat(messages, temperature=0.0, cache_salt="retry1")
        return parse_entity_reply(text)


def build_qa_prompt(
    edited_caption: str,
    entities: tuple[str, ...] | list[str],
    instruction: str,
    edit_kind: EditKind,
) -> list[dict]:
    """Few-shot Entity:/Question:/Answer: prompt; remove edits append the instruction."""
    if not entities:
        raise ValueError("entities must be non-empty")
    exemplars = json.loads(_load_asset("qa_exemplars.json"))
    blocks = []
    for ex in exemplars:
        lines = [f"Caption: {ex['caption']}", f"Entities: {', '.join(ex['entities'])}"]
        if ex.get("instruction"):
            lines.append(f"Instruction: {ex['instruction']}")
        for qa in ex["qa"]:
            lines.append(f"Entity: {qa['entity']}")
            lines.append(f"Question: {qa['question']}")
            lines.append(f"Answer: {qa['answer']}")
        blocks.append("\n".join(lines))
    query = [f"Caption: {edited_caption}", f"Entities: {', '.join(entities)}"]
    if edit_kind is EditKind.REMOVE:
        query.append(f"Instruction: {instruction}")
    blocks.append("\n".join(query))
    return [
        {"role": "system", "content": _load_asset("qa_preamble.txt").strip()},
        {"role": "user", "content": "\n\n".join(blocks)},
    ]


def parse_qa_pairs(
    llm_text: str,
    entities: tuple[str, ...] | list[str],
    edit_kind: EditKind,
    remove_target: Optional[str] = None,
) -> list[QAPair]:
    """Parse Entity:/Question: line pairs; expected answers come from the edit kind."""
    known = {e.strip().lower(): e for e in entities}
    target_key = None
    if edit_kind is EditKind.REMOVE and remove_target:
        target_key = remove_target.strip().lower()
        known.setdefault(target_key, remove_target)
    pairs: list[QAPair] = []
    entity: Optional[str] = None
    for line in llm_text.splitlines():
        line = line.strip()
        if line.lower().startswith("entity:"):
            entity = line[len("entity:"):].strip()
        elif line.lower().startswith("question:") and entity is not None:
            question = line[len("question:"):].strip()
            key = entity.lower()
            if question and key in known:
                expected = (
                    Expected.NO if target_key is not None and key == target_key else Expected.YES
                )
                pairs.append(QAPair(entity=known[key], question=question, expected=expected))
            entity = None
    if not pairs:
        raise QAParseError("no Entity:/Question: pairs found in reply")
    return pairs


def normalize_answer(text: str) -> Optional[Expected]:
    """Map free-text VQA output to yes/no; anything unrecognized is None (unknown)."""
    cleaned = "".join(
        c for c in text.lower() if c not in string.punctuation
    ).strip()
    if cleaned in _YES_WORDS:
        return Expected.YES
    if cleaned in _NO_WORDS:
        return Expected.NO
    return None


def generate_candidates(
    image: np.ndarray,
    mask: Mask,
    edited_caption: str,
    record_id: str,
    out_dir: str | Path,
    gateway: Gateway,
    k: int = DEFAULT_K,
    base_seed: int = 0,
    guidance: Guidance = Guidance(),
) -> list[ImageRef]:
    """Inpaint candidate i with seed base_seed + i and persist it beside the manifest."""
    if k < 1:
        raise ValueError("k must be >= 1")
    out_dir = Path(out_dir)
    refs: list[ImageRef] = []
    for i in range(k):
        candidate = gateway.inpaint(
            image, mask, edited_caption, seed=base_seed + i, guidance=guidance
        )
        path = out_dir / f"{record_id}.cand{i}.png"
        images.save_png(candidate, path)
        refs.append(images.imageref_from_file(path, out_dir))
    return refs


def score_candidate(image: np.ndarray, qa_pairs: list[QAPair], gateway: Gateway) -> int:
    if not qa_pairs:
        raise ValueError("qa_pairs must be non-empty")
    correct = 0
    for pair in qa_pairs:
        answer = gateway.vqa(image, pair.question)
        if normalize_answer(answer) == pair.expected:
            correct += 1
    return correct


def select_best(scores: list[int]) -> int:
    if not scores:
        raise ValueError("scores must be non-empty")
    return scores.index(max(scores))


def run_inpaint_stage(
    manifest: Manifest,
    gateway: Gateway,
    k: int = DEFAULT_K,
    base_seed: int = 0,
    guidance: Guidance = Guidance(),
    dilation_radius: int = 0,
) -> Manifest:
    from .grounding import make_inpaint_input

    out = manifest.clone()
    for rec in out.records:
        if not rec.alive or rec.stage is not Stage.GROUNDED:
            continue
        image = images.load_ref(
            ImageRef(path=rec.input_path, digest=rec.input_digest), out.base_dir
        )
        mask = images.load_mask(Path(out.base_dir) / rec.mask_path)
        image, mask = make_inpaint_input(image, mask, dilation_radius)
        try:
            rec.candidates = generate_candidates(
                image,
                mask,
                rec.edited_caption,
                rec.id,
                out.base_dir,
                gateway,
                k=k,
                base_seed=base_seed,
                guidance=guidance,
            )
        except GatewayError as exc:
            rec.reject(Stage.INPAINTED.value, REASON_INPAINT, str(exc))
            continue
        rec.advance(Stage.INPAINTED)
    return out


def run_rerank_stage(manifest: Manifest, gateway: Gateway) -> Manifest:
    out = manifest.clone()
    for rec in out.records:
        if not rec.alive or rec.stage is not Stage.INPAINTED:
            continue
        try:
            entity_list = extract_entities(rec.edited_caption, gateway)
        except (EntityExtractionError, GatewayError) as exc:
            rec.reject(Stage.SELECTED.value, REASON_ENTITY_EXTRACTION, str(exc))
            continue
        if not entity_list.entities:
            rec.reject(
                Stage.SELECTED.value,
                REASON_ENTITY_EXTRACTION,
                "no entities survive the location/person filter",
            )
            continue
        remove_target = rec.verdict.entity if rec.edit_kind is EditKind.REMOVE else None
        prompt = build_qa_prompt(
            rec.edited_caption, entity_list.entities, rec.instruction, rec.edit_kind
        )
        try:
            reply = gateway.chat(prompt, temperature=0.0)
            try:
                qa_pairs = parse_qa_pairs(
                    reply, entity_list.entities, rec.edit_kind, remove_target
                )
            except QAParseError:
                reply = gateway.chat(prompt, temperature=0.0, cache_salt="retry1")
                qa_pairs = parse_qa_pairs(
                    reply, entity_list.entities, rec.edit_kind, remove_target
                )
        except QAParseError as exc:
            rec.reject(Stage.SELECTED.value, REASON_QA_GENERATION, str(exc))
            continue
        except GatewayError as exc:
            rec.reject(Stage.SELECTED.value, REASON_QA_GENERATION, str(exc))
            continue
        try:
            scores = [
                score_candidate(images.load_ref(ref, out.base_dir), qa_pairs, gateway)
                for ref in rec.candidates
            ]
        except GatewayError as exc:
            rec.reject(Stage.SELECTED.value, REASON_VQA, str(exc))
            continue
        rec.qa_pairs = qa_pairs
        rec.scores = scores
        rec.selected = select_best(scores)
        rec.advance(Stage.SELECTED)
    return out
