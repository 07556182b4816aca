"""Domain types shared by all pipeline stages.

Every sample moves through a fixed stage order; attachments (verdict, bbox,
mask, candidates, scores, split) accumulate as stages run. Rejected samples
are kept, with a reason code, instead of being deleted.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np


class Stage(str, Enum):
    RAW = "raw"
    VERDICTED = "verdicted"
    GROUNDED = "grounded"
    INPAINTED = "inpainted"
    SELECTED = "selected"
    EXPORTED = "exported"

    @property
    def order(self) -> int:
        return _STAGE_ORDER[self]


_STAGE_ORDER = {s: i for i, s in enumerate(Stage)}


class EditKind(str, Enum):
    REMOVE = "remove"
    OTHER = "other"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class SupervisionMode(str, Enum):
    NONE = "none"
    BBOX = "bbox"
    MASK = "mask"


class Expected(str, Enum):
    YES = "yes"
    NO = "no"


@dataclass(frozen=True)
class ImageRef:
    """Reference to a lossless raster file, relative to the dataset root.

    ``width``/``height`` are known only when the ref was built from a real
    file; refs reconstructed from a manifest carry 0 until pixels are loaded.
    """

    path: str
    digest: str
    width: int = 0
    height: int = 0

    def to_wire(self) -> dict:
        return {"path": self.path, "digest": self.digest}

    @classmethod
    def from_wire(cls, obj: dict) -> "ImageRef":
        return cls(path=str(obj["path"]), digest=str(obj["digest"]))


@dataclass(frozen=True)
class Verdict:
    """LLM judgment on whether an edit is feasible and what it targets."""

    possible: bool
    entity: Optional[str]
    reasoning: str = ""

    def __post_init__(self) -> None:
        if self.possible:
            if not self.entity or self.entity.strip().lower() == "none":
                raise ValueError("feasible verdict requires a concrete entity")
        elif self.entity is not None:
            raise ValueError("infeasible verdict must not carry an entity")

    def to_wire(self) -> dict:
        return {
            "possible": self.possible,
            "entity": self.entity,
            "reasoning": self.reasoning,
        }

    @classmethod
    def from_wire(cls, obj: dict) -> "Verdict":
        return cls(
            possible=bool(obj["possible"]),
            entity=obj.get("entity"),
            reasoning=str(obj.get("reasoning", "")),
        )


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel coordinates, half-open: [x0,x1) x [y0,y1)."""

    x0: float
    y0: float
    x1: float
    y1: float
    confidence: float = 1.0

    def __post_init__(self) -> None:
        for name in ("x0", "y0", "x1", "y1", "confidence"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box ({self.x0},{self.y0},{self.x1},{self.y1})")
        if self.x0 < 0 or self.y0 < 0:
            raise ValueError("box extends past the top-left image corner")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0,1]")

    def validate_within(self, width: int, height: int) -> None:
        if self.x1 > width or self.y1 > height:
            raise ValueError(
                f"box ({self.x0},{self.y0},{self.x1},{self.y1}) exceeds image {width}x{height}"
            )

    def as_int(self) -> tuple[int, int, int, int]:
        return (
            int(round(self.x0)),
            int(round(self.y0)),
            int(round(self.x1)),
            int(round(self.y1)),
        )

    def to_wire(self) -> dict:
        return {
            "x0": self.x0,
            "y0": self.y0,
            "x1": self.x1,
            "y1": self.y1,
            "confidence": self.confidence,
        }

    @classmethod
    def from_wire(cls, obj: dict) -> "BBox":
        return cls(
            x0=float(obj["x0"]),
            y0=float(obj["y0"]),
            x1=float(obj["x1"]),
            y1=float(obj["y1"]),
            confidence=float(obj.get("confidence", 1.0)),
        )


@dataclass(frozen=True)
class Mask:
    """Binary raster; ``bits`` is an (height, width) uint8 array of 0/1."""

    width: int
    height: int
    bits: np.ndarray

    def __post_init__(self) -> None:
        if self.bits.shape != (self.height, self.width):
            raise ValueError(
                f"mask bits shape {self.bits.shape} != ({self.height}, {self.width})"
            )
        if self.bits.dtype != np.uint8:
            object.__setattr__(self, "bits", self.bits.astype(np.uint8))
        extra = set(np.unique(self.bits)) - {0, 1}
        if extra:
            raise ValueError(f"mask has non-binary values {sorted(extra)}")

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    @property
    def area_fraction(self) -> float:
        return self.area / float(self.width * self.height)


@dataclass(frozen=True)
class QAPair:
    entity: str
    question: str
    expected: Expected

    def __post_init__(self) -> None:
        if not self.question:
            raise ValueError("empty question")

    def to_wire(self) -> dict:
        return {"entity": self.entity, "question": self.question, "expected": self.expected.value}

    @classmethod
    def from_wire(cls, obj: dict) -> "QAPair":
        return cls(
            entity=str(obj["entity"]),
            question=str(obj["question"]),
            expected=Expected(obj["expected"]),
        )


@dataclass(frozen=True)
class Rejection:
    """Why and where a sample dropped out of the pipeline."""

    stage: str
    reason: str
    detail: str = ""

    def to_wire(self) -> dict:
        return {"stage": self.stage, "reason": self.reason, "detail": self.detail}

    @classmethod
    def from_wire(cls, obj: dict) -> "Rejection":
        return cls(
            stage=str(obj["stage"]),
            reason=str(obj["reason"]),
            detail=str(obj.get("detail", "")),
        )


@dataclass
class EditSample:
    """One <image, caption, instruction, edited caption> record with lifecycle state."""

    id: str
    input_path: str
    input_digest: str
    caption: str
    instruction: str
    edited_caption: str
    edit_kind: Optional[EditKind] = None
    stage: Stage = Stage.RAW
    rejection: Optional[Rejection] = None
    verdict: Optional[Verdict] = None
    bbox: Optional[BBox] = None
    mask_path: Optional[str] = None
    candidates: Optional[list[ImageRef]] = None
    qa_pairs: Optional[list[QAPair]] = None
    scores: Optional[list[int]] = None
    selected: Optional[int] = None
    split: Optional[Split] = None
    extra: dict = field(default_factory=dict)

    def advance(self, stage: Stage) -> None:
        if self.rejection is not None:
            raise ValueError(f"record {self.id} is rejected and cannot advance")
        if stage.order < self.stage.order:
            raise ValueError(
                f"record {self.id}: stage may not move backwards "
                f"({self.stage.value} -> {stage.value})"
            )
        self.stage = stage

    def reject(self, stage: str, reason: str, detail: str = "") -> None:
        self.rejection = Rejection(stage=stage, reason=reason, detail=detail)

    @property
    def alive(self) -> bool:
        return self.rejection is None

    def clone(self) -> "EditSample":
        return replace(
            self,
            candidates=list(self.candidates) if self.candidates is not None else None,
            qa_pairs=list(self.qa_pairs) if self.qa_pairs is not None else None,
            scores=list(self.scores) if self.scores is not None else None,
            extra=dict(self.extra),
        )

    def validate(self) -> None:
        if self.scores is not None:
            if self.selected is None:
                raise ValueError(f"record {self.id}: scores present without selection")
            if self.candidates is not None and len(self.candidates) != len(self.scores):
                raise ValueError(
                    f"record {self.id}: {len(self.candidates)} candidates "
                    f"but {len(self.scores)} scores"
                )
            if not (0 <= self.selected < len(self.scores)):
                raise ValueError(f"record {self.id}: selected index out of range")
            if self.scores[self.selected] != max(self.scores):
                raise ValueError(f"record {self.id}: selected candidate is not the argmax")
            if self.qa_pairs is not None and any(
                s < 0 or s > len(self.qa_pairs) for s in self.scores
            ):
                raise ValueError(f"record {self.id}: score outside [0, #questions]")


@dataclass(frozen=True)
class TrainingRecord:
    """One exported fine-tuning example: conditioning image, instruction, target."""

    conditioning_image: ImageRef
    instruction: str
    target_image: ImageRef
    supervision_mode: SupervisionMode
    split: Split

    def __post_init__(self) -> None:
        if (
            self.conditioning_image.width
            and self.target_image.width
            and (self.conditioning_image.width, self.conditioning_image.height)
            != (self.target_image.width, self.target_image.height)
        ):
            raise ValueError("conditioning and target image dimensions differ")
