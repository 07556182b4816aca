"""Test-set curation: similarity dedup, verb-stratified sampling, source filters.

In-domain candidates are kept only when their best cosine similarity against
the training images stays strictly below the threshold, then sampled per
instruction verb. Out-of-domain sources are filtered to single-turn edits
with change-action instructions removed by a configurable blocklist.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import images
from .gateway import Gateway, GatewayError
from .manifest import Manifest
from .types import EditSample, ImageRef
from .verdict import leading_verb

log = logging.getLogger(__name__)

DEFAULT_SIM_THRESHOLD = 0.7
DEFAULT_VERBS = ("replace", "swap", "add", "turn", "change")
DEFAULT_PER_VERB = 20

# Seeded with the known change-action phrasings; extend via config.
DEFAULT_CHANGE_ACTION_BLOCKLIST = (
    "make the person jump",
    "make the dog look away",
)

EMBED_DECIMALS = 8


@dataclass(frozen=True)
class VerbBucket:
    """Samples whose instructions share a leading verb, plus the sampling quota."""

    verb: str
    samples: tuple[str, ...]  # record ids
    quota: int

    def __post_init__(self) -> None:
        if self.quota < 1:
            raise ValueError("quota must be >= 1")


def bucket_by_verb(
    pool: Sequence[EditSample], verbs: Sequence[str], per_verb: int
) -> list[VerbBucket]:
    buckets = []
    for verb in verbs:
        verb_key = verb.lower()
        ids = sorted(r.id for r in pool if leading_verb(r.instruction) == verb_key)
        buckets.append(VerbBucket(verb=verb_key, samples=tuple(ids), quota=per_verb))
    return buckets


def dedup_filter(
    candidates: Sequence[EditSample],
    training_embeddings: np.ndarray,
    gateway: Gateway,
    base_dir: str | Path,
    threshold: float = DEFAULT_SIM_THRESHOLD,
) -> list[EditSample]:
    """Keep candidates whose max cosine similarity to training images is < threshold."""
    if not (0.0 < threshold <= 1.0):
        raise ValueError(f"threshold {threshold} outside (0, 1]")
    training = np.asarray(training_embeddings, dtype=np.float64)
    if training.size == 0:
        raise ValueError("training embeddings must be non-empty")
    kept: list[EditSample] = []
    for rec in candidates:
        try:
            image = images.load_ref(
                ImageRef(path=rec.input_path, digest=rec.input_digest), base_dir
            )
            vec = gateway.embed(image)
        except (GatewayError, OSError, ValueError) as exc:
            log.warning("dropping %s: embedding failed: %s", rec.id, exc)
            continue
        max_sim = float(training @ vec) if training.ndim == 1 else float(np.max(training @ vec))
        if max_sim < threshold:
            kept.append(rec)
    return kept


def stratified_sample(
    pool: Sequence[EditSample],
    verbs: Sequence[str] = DEFAULT_VERBS,
    per_verb: int = DEFAULT_PER_VERB,
    seed: int = 0,
) -> list[EditSample]:
    """Pick per_verb records per instruction verb; short buckets are taken whole."""
    if per_verb < 1:
        raise ValueError("per_verb must be >= 1")
    if not pool:
        raise ValueError("pool is empty")
    by_id = {r.id: r for r in pool}
    rng = random.Random(seed)
    chosen: list[EditSample] = []
    for bucket in bucket_by_verb(pool, verbs, per_verb):
        if len(bucket.samples) < bucket.quota:
            log.warning(
                "verb %r has only %d records for quota %d",
                bucket.verb, len(bucket.samples), bucket.quota,
            )
            take = list(bucket.samples)
        else:
            take = sorted(rng.sample(list(bucket.samples), bucket.quota))
        chosen.extend(by_id[rec_id] for rec_id in take)
    return chosen


def _normalize_phrase(text: str) -> str:
    return " ".join(text.lower().strip().strip(".!?,;:").split())


def magicbrush_filter(
    records: Iterable[Mapping],
    blocklist: Sequence[str] = DEFAULT_CHANGE_ACTION_BLOCKLIST,
) -> list[Mapping]:
    """Keep single-turn records whose instruction is not a change-action phrase."""
    blocked = {_normalize_phrase(p) for p in blocklist}
    kept = []
    for rec in records:
        if int(rec.get("turns", 1)) != 1:
            continue
        if _normalize_phrase(str(rec.get("instruction", ""))) in blocked:
            continue
        kept.append(rec)
    return kept


def save_embeddings(path: str | Path, embeddings: Mapping[str, np.ndarray]) -> None:
    """Write `digest, dim, v1..vd` lines in fixed decimal text, sorted by digest."""
    lines = []
    for digest in sorted(embeddings):
        vec = np.asarray(embeddings[digest], dtype=np.float64)
        comps = ",".join(f"{v:.{EMBED_DECIMALS}f}" for v in vec)
        lines.append(f"{digest},{vec.size},{comps}")
    images.write_atomic(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))


def load_embeddings(path: str | Path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) < 3:
            raise ValueError(f"{path}:{lineno}: expected digest, dim, components")
        digest, dim = parts[0], int(parts[1])
        vec = np.asarray([float(v) for v in parts[2:]], dtype=np.float64)
        if vec.size != dim:
            raise ValueError(f"{path}:{lineno}: dim {dim} != {vec.size} components")
        out[digest] = vec
    return out


def compute_training_embeddings(
    manifest: Manifest, gateway: Gateway
) -> dict[str, np.ndarray]:
    """Embed every distinct training image once, keyed by content digest."""
    out: dict[str, np.ndarray] = {}
    for rec in manifest.records:
        if not rec.alive or rec.input_digest in out:
            continue
        image = images.load_ref(
            ImageRef(path=rec.input_path, digest=rec.input_digest), manifest.base_dir
        )
        out[rec.input_digest] = gateway.embed(image)
    return out
