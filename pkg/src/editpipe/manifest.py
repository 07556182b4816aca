"""Line-delimited manifest persistence, split assignment, and training export.

One JSON object per line, one line per sample. Paths inside a manifest are
POSIX-relative to the manifest file's directory, which keeps runs diffable
and lets a whole working directory move. Unknown fields on a line survive a
load/save round-trip verbatim so newer writers do not lose data.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

from . import images
from .types import (
    BBox,
    EditKind,
    EditSample,
    ImageRef,
    QAPair,
    Rejection,
    Split,
    Stage,
    SupervisionMode,
    TrainingRecord,
    Verdict,
)

log = logging.getLogger(__name__)

# Wire field order is fixed so that rewriting an unchanged manifest is
# byte-identical.
_FIELD_ORDER = (
    "id",
    "input_path",
    "input_digest",
    "caption",
    "instruction",
    "edited_caption",
    "edit_kind",
    "stage",
    "rejection",
    "verdict",
    "bbox",
    "mask_path",
    "candidates",
    "qa_pairs",
    "scores",
    "selected",
    "split",
)


class ManifestError(Exception):
    pass


@dataclass
class Manifest:
    """Ordered collection of samples plus the directory their paths resolve against."""

    records: list[EditSample] = field(default_factory=list)
    base_dir: Path = Path(".")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self, record_id: str) -> EditSample:
        for rec in self.records:
            if rec.id == record_id:
                return rec
        raise KeyError(record_id)

    def at_stage(self, stage: Stage, alive_only: bool = True) -> list[EditSample]:
        return [
            r
            for r in self.records
            if r.stage == stage and (r.alive or not alive_only)
        ]

    def clone(self) -> "Manifest":
        return Manifest(records=[r.clone() for r in self.records], base_dir=self.base_dir)


def record_to_wire(rec: EditSample) -> dict:
    obj: dict = {
        "id": rec.id,
        "input_path": rec.input_path,
        "input_digest": rec.input_digest,
        "caption": rec.caption,
        "instruction": rec.instruction,
        "edited_caption": rec.edited_caption,
    }
    if rec.edit_kind is not None:
        obj["edit_kind"] = rec.edit_kind.value
    obj["stage"] = rec.stage.value
    if rec.rejection is not None:
        obj["rejection"] = rec.rejection.to_wire()
    if rec.verdict is not None:
        obj["verdict"] = rec.verdict.to_wire()
    if rec.bbox is not None:
        obj["bbox"] = rec.bbox.to_wire()
    if rec.mask_path is not None:
        obj["mask_path"] = rec.mask_path
    if rec.candidates is not None:
        obj["candidates"] = [c.to_wire() for c in rec.candidates]
    if rec.qa_pairs is not None:
        obj["qa_pairs"] = [q.to_wire() for q in rec.qa_pairs]
    if rec.scores is not None:
        obj["scores"] = list(rec.scores)
    if rec.selected is not None:
        obj["selected"] = rec.selected
    if rec.split is not None:
        obj["split"] = rec.split.value
    for key, value in rec.extra.items():
        if key not in obj:
            obj[key] = value
    return obj


def record_from_wire(obj: dict) -> EditSample:
    try:
        rec = EditSample(
            id=str(obj["id"]),
            input_path=str(obj["input_path"]),
            input_digest=str(obj["input_digest"]),
            caption=str(obj["caption"]),
            instruction=str(obj["instruction"]),
            edited_caption=str(obj["edited_caption"]),
            edit_kind=EditKind(obj["edit_kind"]) if "edit_kind" in obj else None,
            stage=Stage(obj.get("stage", "raw")),
            rejection=Rejection.from_wire(obj["rejection"]) if "rejection" in obj else None,
            verdict=Verdict.from_wire(obj["verdict"]) if "verdict" in obj else None,
            bbox=BBox.from_wire(obj["bbox"]) if "bbox" in obj else None,
            mask_path=obj.get("mask_path"),
            candidates=(
                [ImageRef.from_wire(c) for c in obj["candidates"]]
                if "candidates" in obj
                else None
            ),
            qa_pairs=(
                [QAPair.from_wire(q) for q in obj["qa_pairs"]]
                if "qa_pairs" in obj
                else None
            ),
            scores=[int(s) for s in obj["scores"]] if "scores" in obj else None,
            selected=int(obj["selected"]) if "selected" in obj else None,
            split=Split(obj["split"]) if "split" in obj else None,
        )
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"bad record: {exc}") from exc
    rec.extra = {k: v for k, v in obj.items() if k not in _FIELD_ORDER}
    rec.validate()
    return rec


def load_manifest(path: str | Path) -> Manifest:
    """Parse a line-delimited manifest; duplicate ids and unparseable lines are errors."""
    path = Path(path)
    records: list[EditSample] = []
    seen: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed line: {exc}") from exc
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: line is not an object")
            try:
                rec = record_from_wire(obj)
            except ManifestError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            if rec.id in seen:
                raise ManifestError(
                    f"duplicate id {rec.id!r} at lines {seen[rec.id]} and {lineno}"
                )
            seen[rec.id] = lineno
            records.append(rec)
    return Manifest(records=records, base_dir=path.parent)


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    """Serialize atomically; a reload is field-for-field equal to the input."""
    path = Path(path)
    buf = io.StringIO()
    for rec in manifest.records:
        buf.write(json.dumps(record_to_wire(rec), ensure_ascii=False))
        buf.write("\n")
    images.write_atomic(path, buf.getvalue().encode("utf-8"))


def assign_splits(
    manifest: Manifest,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> Manifest:
    """Partition selected, non-rejected records into train/val/test.

    Each split gets floor(n * ratio) records; the remainder goes to train.
    Shuffling is by record id under a fixed seed, so reruns are stable.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios {ratios} do not sum to 1")
    out = manifest.clone()
    eligible = [
        r for r in out.records if r.alive and r.stage.order >= Stage.SELECTED.order
    ]
    if not eligible:
        raise ManifestError("no eligible records to split")
    order = sorted(eligible, key=lambda r: r.id)
    random.Random(seed).shuffle(order)
    n = len(order)
    n_train = int(n * ratios[0])
    n_val = int(n * ratios[1])
    n_test = int(n * ratios[2])
    n_train += n - (n_train + n_val + n_test)
    for rec in order[:n_train]:
        rec.split = Split.TRAIN
    for rec in order[n_train : n_train + n_val]:
        rec.split = Split.VAL
    for rec in order[n_train + n_val :]:
        rec.split = Split.TEST
    return out


def _noise_seed(base_seed: int, record_id: str) -> int:
    # Stable across platforms; Python's hash() is salted per process.
    digest = hashlib.sha256(f"{base_seed}:{record_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def export_training_records(
    manifest: Manifest,
    supervision_mode: SupervisionMode,
    out_dir: str | Path,
    noise_seed: int = 0,
    stroke_px: int = 4,
    color: tuple[int, int, int] = (255, 0, 0),
) -> list[TrainingRecord]:
    """Write conditioning/target image pairs plus an index file under ``out_dir``.

    The conditioning image is the raw input (mode none), the input with the
    grounding box drawn on it (mode bbox), or the input with the mask region
    replaced by seeded noise (mode mask). The target is the selected
    inpainted candidate.
    """
    from . import grounding  # late import: grounding also uses core types

    out_dir = Path(out_dir)
    records: list[TrainingRecord] = []
    eligible = [
        r
        for r in manifest.records
        if r.alive and r.stage.order >= Stage.SELECTED.order
    ]
    if not eligible:
        raise ManifestError("no selected records to export")
    index_lines: list[str] = []
    for rec in eligible:
        if rec.split is None:
            raise ManifestError(f"record {rec.id} has no split assigned")
        if rec.candidates is None or rec.selected is None:
            raise ManifestError(f"record {rec.id} has no selected candidate")
        if supervision_mode is not SupervisionMode.NONE and (
            rec.bbox is None or rec.mask_path is None
        ):
            raise ManifestError(
                f"record {rec.id} lacks grounding required for mode {supervision_mode.value}"
            )
        input_img = images.load_ref(
            ImageRef(path=rec.input_path, digest=rec.input_digest), manifest.base_dir
        )
        if supervision_mode is SupervisionMode.NONE:
            cond = input_img
        elif supervision_mode is SupervisionMode.BBOX:
            cond = grounding.draw_bbox(input_img, rec.bbox, stroke_px=stroke_px, color=color)
        else:
            mask = images.load_mask(manifest.base_dir / rec.mask_path)
            noise = grounding.NoiseParams(seed=_noise_seed(noise_seed, rec.id))
            cond = grounding.apply_mask_noise(input_img, mask, noise)
        target_ref = rec.candidates[rec.selected]
        target_img = images.load_ref(target_ref, manifest.base_dir)
        if cond.shape != target_img.shape:
            raise ManifestError(
                f"record {rec.id}: conditioning {cond.shape} != target {target_img.shape}"
            )

        split_dir = out_dir / rec.split.value
        split_dir.mkdir(parents=True, exist_ok=True)
        cond_path = split_dir / f"{rec.id}.cond.png"
        target_path = split_dir / f"{rec.id}.target.png"
        images.save_png(cond, cond_path)
        images.save_png(target_img, target_path)

        training = TrainingRecord(
            conditioning_image=imagesref_relative(cond_path, out_dir),
            instruction=rec.instruction,
            target_image=imagesref_relative(target_path, out_dir),
            supervision_mode=supervision_mode,
            split=rec.split,
        )
        records.append(training)
        index_lines.append(
            json.dumps(
                {
                    "conditioning_path": training.conditioning_image.path,
                    "instruction": training.instruction,
                    "target_path": training.target_image.path,
                    "supervision_mode": supervision_mode.value,
                    "split": rec.split.value,
                },
                ensure_ascii=False,
            )
        )
    images.write_atomic(out_dir / "index.jsonl", ("\n".join(index_lines) + "\n").encode("utf-8"))
    return records


def imagesref_relative(path: Path, base_dir: Path) -> ImageRef:
    return images.imageref_from_file(path, base_dir)


def stage_counts(manifest: Manifest) -> dict:
    """Per-stage and per-rejection-reason histogram used by the stats command."""
    stages = {s.value: 0 for s in Stage}
    reasons: dict[str, int] = {}
    for rec in manifest.records:
        if rec.alive:
            stages[rec.stage.value] += 1
        else:
            reasons[rec.rejection.reason] = reasons.get(rec.rejection.reason, 0) + 1
    return {
        "total": len(manifest.records),
        "kept": sum(stages.values()),
        "rejected": sum(reasons.values()),
        "by_stage": stages,
        "by_rejection_reason": dict(sorted(reasons.items())),
    }
