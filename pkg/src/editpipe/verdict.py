"""Feasibility filtering: few-shot CoT prompt, verdict parsing, edit-kind rules.

The chat backend reasons about whether an instruction makes sense for a
caption and names the entity the edit applies to; the reply ends in a small
JSON object we parse here. Infeasible or unparseable records are rejected,
never dropped.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from importlib import resources

from .gateway import Gateway, GatewayError
from .manifest import Manifest
from .types import EditKind, Stage, Verdict

log = logging.getLogger(__name__)

REASONING_OPENER = "The resulting image would show"
REMOVE_VERBS = ("remove", "delete", "erase", "take away")

REASON_INFEASIBLE = "infeasible"
REASON_UNPARSEABLE = "unparseable"
REASON_BACKEND = "backend"


class VerdictParseError(Exception):
    pass


class NoJsonFound(VerdictParseError):
    pass


class MissingVerdictField(VerdictParseError):
    pass


class InconsistentVerdict(VerdictParseError):
    pass


@dataclass(frozen=True)
class VerdictExemplar:
    caption: str
    instruction: str
    reasoning: str
    verdict: str
    entity: str

    def __post_init__(self) -> None:
        if not self.reasoning.startswith(REASONING_OPENER):
            raise ValueError(
                f"exemplar reasoning must start with {REASONING_OPENER!r}"
            )

    def rendered_answer(self) -> str:
        answer = json.dumps({"verdict": self.verdict, "entity": self.entity})
        return f"{self.reasoning}\n{answer}"


@dataclass(frozen=True)
class VerdictPrompt:
    system_preamble: str
    exemplars: tuple[VerdictExemplar, ...]
    query: dict

    def messages(self) -> list[dict]:
        blocks = []
        for ex in self.exemplars:
            blocks.append(
                f"Caption: {ex.caption}\n"
                f"Instruction: {ex.instruction}\n"
                f"{ex.rendered_answer()}"
            )
        blocks.append(
            f"Caption: {self.query['caption']}\nInstruction: {self.query['instruction']}"
        )
        return [
            {"role": "system", "content": self.system_preamble},
            {"role": "user", "content": "\n\n".join(blocks)},
        ]


def _load_asset(name: str) -> str:
    return resources.files("editpipe.prompts").joinpath(name).read_text(encoding="utf-8")


def load_verdict_exemplars() -> tuple[VerdictExemplar, ...]:
    raw = json.loads(_load_asset("verdict_exemplars.json"))
    return tuple(VerdictExemplar(**item) for item in raw)


def build_verdict_prompt(caption: str, instruction: str) -> VerdictPrompt:
    if not caption or not instruction:
        raise ValueError("caption and instruction must be non-empty")
    return VerdictPrompt(
        system_preamble=_load_asset("verdict_preamble.txt").strip(),
        exemplars=load_verdict_exemplars(),
        query={"caption": caption, "instruction": instruction},
    )


def _iter_json_objects(text: str):
    """Yield (start, end, obj) for every top-level JSON object in the text."""
    decoder = json.JSONDecoder()
    pos = 0
    while True:
        start = text.find("{", pos)
        if start == -1:
            return
        try:
            obj, end = decoder.raw_decode(text[start:])
        except json.JSONDecodeError:
            pos = start + 1
            continue
        if isinstance(obj, dict):
            yield start, start + end, obj
            pos = start + end
        else:
            pos = start + 1


def parse_verdict(llm_text: str) -> Verdict:
    """Parse the last well-formed JSON object of a chat reply into a Verdict."""
    found = None
    for start, end, obj in _iter_json_objects(llm_text):
        found = (start, obj)
    if found is None:
        raise NoJsonFound("reply contains no JSON object")
    start, obj = found

    raw = obj.get("verdict")
    if isinstance(raw, bool):
        possible = raw
    elif isinstance(raw, str) and raw.strip().lower() in ("true", "false"):
        possible = raw.strip().lower() == "true"
    elif raw is None:
        raise MissingVerdictField("no verdict field in JSON object")
    else:
        raise MissingVerdictField(f"unusable verdict value {raw!r}")

    entity = obj.get("entity")
    if isinstance(entity, str):
        entity = entity.strip()
    if not entity or (isinstance(entity, str) and entity.lower() == "none"):
        entity = None
    if possible and entity is None:
        raise InconsistentVerdict("verdict true but no entity named")
    if not possible:
        entity = None

    reasoning = llm_text[:start].strip()
    return Verdict(possible=possible, entity=entity, reasoning=reasoning)


def leading_verb(instruction: str) -> str:
    """First word of the instruction, lowercased and stripped of punctuation."""
    for token in instruction.strip().split():
        word = token.strip(".,;:!?\"'").lower()
        if word:
            return word
    return ""


def classify_edit_kind(instruction: str) -> EditKind:
    if not instruction.strip():
        raise ValueError("instruction must be non-empty")
    head = instruction.strip().lower()
    for verb in REMOVE_VERBS:
        if head.startswith(verb) and (
            len(head) == len(verb) or not head[len(verb)].isalnum()
        ):
            return EditKind.REMOVE
    return EditKind.OTHER


def request_verdict(gateway: Gateway, caption: str, instruction: str) -> Verdict:
    """One chat round trip with a single salted retry on unparseable replies."""
    prompt = build_verdict_prompt(caption, instruction)
    text = gateway.chat(prompt.messages(), temperature=0.0)
    try:
        return parse_verdict(text)
    except VerdictParseError:
        text = gateway.chat(prompt.messages(), temperature=0.0, cache_salt="retry1")
        return parse_verdict(text)


def run_verdict_stage(manifest: Manifest, gateway: Gateway) -> Manifest:
    out = manifest.clone()
    for rec in out.records:
        if not rec.alive or rec.stage is not Stage.RAW:
            continue
        rec.edit_kind = classify_edit_kind(rec.instruction)
        try:
            verdict = request_verdict(gateway, rec.caption, rec.instruction)
        except VerdictParseError as exc:
            rec.reject(Stage.VERDICTED.value, REASON_UNPARSEABLE, str(exc))
            continue
        except GatewayError as exc:
            rec.reject(Stage.VERDICTED.value, REASON_BACKEND, str(exc))
            continue
        rec.verdict = verdict
        if not verdict.possible:
            rec.reject(Stage.VERDICTED.value, REASON_INFEASIBLE, verdict.reasoning)
            continue
        rec.advance(Stage.VERDICTED)
    return out
