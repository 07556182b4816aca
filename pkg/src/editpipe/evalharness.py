"""Reference-free faithfulness scoring and human-judgment statistics.

TIFA-style scoring asks an LLM for multiple-choice questions about a caption,
answers them with the VQA backend, and averages per-image correctness. Human
judgments (Yes / Partially / No) are summarized as the mapped mean (H-score)
and chance-corrected agreement (Krippendorff's alpha).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

from . import images
from .gateway import Gateway
from .manifest import Manifest
from .rerank import _iter_json_arrays

log = logging.getLogger(__name__)

LABELS = ("No", "Partially", "Yes")  # ordinal order, low to high
LABEL_VALUES = {"Yes": 1.0, "Partially": 0.5, "No": 0.0}

MIN_QUESTIONS = 3


class TifaParseError(Exception):
    pass


@dataclass(frozen=True)
class MCQuestion:
    question: str
    choices: tuple[str, ...]
    answer: str

    def __post_init__(self) -> None:
        if len(self.choices) < 2:
            raise ValueError("need at least two choices")
        lowered = [c.strip().lower() for c in self.choices]
        if len(set(lowered)) != len(lowered):
            raise ValueError("choices must be pairwise distinct")
        if self.answer.strip().lower() not in lowered:
            raise ValueError(f"answer {self.answer!r} not among choices")


@dataclass(frozen=True)
class TifaQuestionSet:
    questions: tuple[MCQuestion, ...]
    low_coverage: bool


@dataclass
class JudgmentTable:
    """Sparse (item, rater) -> label table of 3-way human ratings.

    Justifications ride along for audit but never enter the statistics.
    """

    items: list[str] = field(default_factory=list)
    raters: list[str] = field(default_factory=list)
    ratings: dict[tuple[str, str], str] = field(default_factory=dict)
    justifications: dict[tuple[str, str], str] = field(default_factory=dict)

    def add(self, item: str, rater: str, label: str, justification: str = "") -> None:
        canonical = canonical_label(label)
        if item not in self.items:
            self.items.append(item)
        if rater not in self.raters:
            self.raters.append(rater)
        self.ratings[(item, rater)] = canonical
        if justification:
            self.justifications[(item, rater)] = justification

    def ratings_for(self, item: str) -> list[str]:
        return [
            self.ratings[(item, rater)]
            for rater in self.raters
            if (item, rater) in self.ratings
        ]

    def __len__(self) -> int:
        return len(self.ratings)


def canonical_label(label: str) -> str:
    key = label.strip().lower()
    if key in ("yes", "y"):
        return "Yes"
    if key in ("partially", "partially yes", "partial", "p"):
        return "Partially"
    if key in ("no", "n"):
        return "No"
    raise ValueError(f"unknown judgment label {label!r}")


def load_ratings(path: str | Path) -> JudgmentTable:
    """Read a ratings CSV with header item_id,rater_id,label,justification."""
    table = JudgmentTable()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"item_id", "rater_id", "label"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(
                f"ratings file needs columns item_id,rater_id,label; got {reader.fieldnames}"
            )
        for row in reader:
            table.add(
                row["item_id"],
                row["rater_id"],
                row["label"],
                justification=row.get("justification") or "",
            )
    return table


# -- TIFA ---------------------------------------------------------------------


def parse_tifa_reply(llm_text: str) -> list[MCQuestion]:
    last = None
    for arr in _iter_json_arrays(llm_text):
        last = arr
    if last is None:
        raise TifaParseError("reply contains no JSON array")
    questions: list[MCQuestion] = []
    for item in last:
        if not isinstance(item, dict):
            continue
        try:
            q = MCQuestion(
                question=str(item["question"]),
                choices=tuple(str(c) for c in item["choices"]),
                answer=str(item["answer"]),
            )
        except (KeyError, TypeError, ValueError):
            continue  # invariant-violating tuples are dropped, not fatal
        questions.append(q)
    return questions


def tifa_generate(caption: str, gateway: Gateway) -> TifaQuestionSet:
    """Elicit multiple-choice QA tuples for a caption; sparse replies are flagged."""
    if not caption:
        raise ValueError("caption must be non-empty")
    template = (
        resources.files("editpipe.prompts")
        .joinpath("tifa_questions.txt")
        .read_text(encoding="utf-8")
    )
    messages = [{"role": "user", "content": template.replace("{caption}", caption)}]
    text = gateway.chat(messages, temperature=0.0)
    try:
        questions = parse_tifa_reply(text)
    except TifaParseError:
        text = gateway.chat(messages, temperature=0.0, cache_salt="retry1")
        questions = parse_tifa_reply(text)
    return TifaQuestionSet(
        questions=tuple(questions), low_coverage=len(questions) < MIN_QUESTIONS
    )


def _normalize_choice(text: str) -> str:
    import string

    return "".join(c for c in text.lower() if c not in string.punctuation).strip()


def tifa_score_image(
    image: np.ndarray, questions: Iterable[MCQuestion], gateway: Gateway
) -> float:
    """Fraction of questions whose VQA answer matches the correct choice."""
    questions = list(questions)
    if not questions:
        raise ValueError("questions must be non-empty")
    correct = 0
    for q in questions:
        answer = _normalize_choice(gateway.vqa(image, q.question))
        matched = None
        for choice in q.choices:
            if _normalize_choice(choice) == answer:
                matched = choice
                break
        if matched is not None and matched.strip().lower() == q.answer.strip().lower():
            correct += 1
    return correct / len(questions)


def tifa_corpus(
    manifest: Manifest,
    system_outputs: Mapping[str, str | Path],
    gateway: Gateway,
) -> dict:
    """Score one system's outputs over the test records it covers.

    ``system_outputs`` maps record id to the system's output image path.
    Records without an output are listed as missing and skipped; an empty
    intersection is an error.
    """
    test_records = [r for r in manifest.records if r.alive]
    missing = [r.id for r in test_records if r.id not in system_outputs]
    scored = [r for r in test_records if r.id in system_outputs]
    if not scored:
        raise ValueError("no test records have outputs for this system")
    if missing:
        log.warning("scoring %d records; %d missing outputs", len(scored), len(missing))
    per_image: dict[str, float] = {}
    low_coverage: list[str] = []
    for rec in scored:
        question_set = tifa_generate(rec.edited_caption, gateway)
        if question_set.low_coverage:
            low_coverage.append(rec.id)
        if not question_set.questions:
            continue
        image = images.load_rgb(system_outputs[rec.id])
        per_image[rec.id] = tifa_score_image(image, question_set.questions, gateway)
    if not per_image:
        raise ValueError("no records could be scored")
    return {
        "per_image": per_image,
        "mean": sum(per_image.values()) / len(per_image),
        "missing": missing,
        "low_coverage": low_coverage,
    }


# -- human-judgment statistics ------------------------------------------------


def h_score(table: JudgmentTable) -> float:
    """Mean of ratings mapped Yes -> 1, Partially -> 1/2, No -> 0."""
    if not table.ratings:
        raise ValueError("judgment table is empty")
    values = [LABEL_VALUES[label] for label in table.ratings.values()]
    return sum(values) / len(values)


def _ordinal_deltas(counts: dict[str, float]) -> dict[tuple[str, str], float]:
    """Squared ordinal distances from cumulative label frequencies."""
    ordered = [label for label in LABELS if counts.get(label, 0) > 0]
    deltas: dict[tuple[str, str], float] = {}
    for i, a in enumerate(ordered):
        for j, b in enumerate(ordered):
            if i > j:
                continue
            between = sum(counts[label] for label in ordered[i : j + 1])
            d = between - (counts[a] + counts[b]) / 2.0
            deltas[(a, b)] = deltas[(b, a)] = d * d
    return deltas


def krippendorff_alpha(table: JudgmentTable, metric: str = "nominal") -> float:
    """Chance-corrected inter-rater agreement, alpha = 1 - D_o / D_e.

    Built on the coincidence matrix: every ordered pair of ratings within an
    item contributes 1/(m_u - 1) to the cell for its label pair, where m_u is
    the item's rating count. Items with a single rating carry no pairs and
    are excluded. Observed disagreement weights coincidences by the squared
    distance between labels; expected disagreement uses the products of the
    marginal label totals. Perfect homogeneity (D_e = 0) is defined as 1.0.
    """
    if metric not in ("nominal", "ordinal"):
        raise ValueError(f"unknown metric {metric!r}")
    units = []
    for item in table.items:
        ratings = table.ratings_for(item)
        if len(ratings) >= 2:
            units.append(ratings)
    if not units:
        raise ValueError("need at least one item with two or more ratings")

    labels = sorted({r for unit in units for r in unit})
    coincidence: dict[tuple[str, str], float] = {}
    totals: dict[str, float] = {label: 0.0 for label in labels}
    for unit in units:
        m = len(unit)
        counts: dict[str, int] = {}
        for r in unit:
            counts[r] = counts.get(r, 0) + 1
        for a in counts:
            for b in counts:
                pairs = counts[a] * (counts[b] - (1 if a == b else 0))
                if pairs:
                    coincidence[(a, b)] = coincidence.get((a, b), 0.0) + pairs / (m - 1)
    for (a, _), value in coincidence.items():
        totals[a] += value
    n = sum(totals.values())

    if metric == "nominal":
        deltas = {
            (a, b): 0.0 if a == b else 1.0 for a in labels for b in labels
        }
    else:
        deltas = _ordinal_deltas(totals)
        for a in labels:
            deltas[(a, a)] = 0.0

    d_observed = sum(
        value * deltas[pair] for pair, value in coincidence.items()
    )
    d_expected = sum(
        totals[a] * totals[b] * deltas[(a, b)] for a in labels for b in labels
    ) / (n - 1)
    if d_expected == 0.0:
        return 1.0
    return 1.0 - d_observed / d_expected


def eval_report(
    table: JudgmentTable, tifa_results: Optional[Mapping[str, dict]] = None
) -> dict:
    """Combined report: H-score, both alpha variants, optional per-system TIFA."""
    report = {
        "h_score": h_score(table),
        "krippendorff_alpha_nominal": krippendorff_alpha(table, "nominal"),
        "krippendorff_alpha_ordinal": krippendorff_alpha(table, "ordinal"),
        "ratings": len(table),
        "items": len(table.items),
        "raters": len(table.raters),
    }
    if tifa_results:
        report["tifa"] = {
            system: {"mean": result["mean"], "per_image": result["per_image"]}
            for system, result in tifa_results.items()
        }
    return report
