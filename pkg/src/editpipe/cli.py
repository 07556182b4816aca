"""Command-line entry point chaining the pipeline stages.

Each stage is its own subcommand reading one manifest and atomically writing
the next, so expensive stages can be re-run selectively; with a warm response
cache a rerun is a byte-identical no-op. Exit codes: 0 success, 1 usage
error (including stage mismatch), 2 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import evalharness, grounding, images, manifest as manifest_mod, rerank, testset, verdict
from .gateway import BackendConfig, Gateway, HttpTransport, endpoint_urls
from .manifest import Manifest, load_manifest, save_manifest, stage_counts
from .types import Stage, SupervisionMode

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_STAGE_FAILURE = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


@dataclass
class RunConfig:
    seed: int = 0
    k: int = 3
    supervision: str = "none"
    box_threshold: float = grounding.DEFAULT_BOX_THRESHOLD
    sim_threshold: float = testset.DEFAULT_SIM_THRESHOLD
    area_lo: float = grounding.DEFAULT_AREA_BOUNDS[0]
    area_hi: float = grounding.DEFAULT_AREA_BOUNDS[1]
    per_verb: int = testset.DEFAULT_PER_VERB
    verbs: str = ",".join(testset.DEFAULT_VERBS)
    metric: str = "nominal"
    stroke_px: int = grounding.DEFAULT_STROKE_PX
    dilation_radius: int = 0
    timeout: float = 60.0
    max_retries: int = 2
    backoff: float = 0.5
    max_parallel: int = 4
    backend_url: str = ""

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        """Parse a `key = value` config file; unknown keys are an error."""
        cfg = cls()
        if not path:
            return cfg
        known = {f.name: f.type for f in fields(cls)}
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
            current = getattr(cfg, key)
            setattr(cfg, key, type(current)(value))
        return cfg

    def apply_flags(self, args: argparse.Namespace) -> "RunConfig":
        for name in vars(self):
            flag = getattr(args, name, None)
            if flag is not None:
                setattr(self, name, flag)
        return self


def make_gateway(cfg: RunConfig) -> Gateway:
    backend = BackendConfig.from_env(
        timeout=cfg.timeout,
        max_retries=cfg.max_retries,
        backoff=cfg.backoff,
        max_parallel=cfg.max_parallel,
    )
    if cfg.backend_url and not backend.urls:
        backend.urls = endpoint_urls(cfg.backend_url)
    return Gateway(HttpTransport(backend), backend)


def _require_stage(m: Manifest, stage: Stage, command: str) -> None:
    if not m.at_stage(stage):
        present = sorted({r.stage.value for r in m.records if r.alive})
        raise UsageError(
            f"{command}: no records at stage {stage.value!r} "
            f"(found stages: {', '.join(present) or 'none'})"
        )


def _check_same_dir(in_path: str, out_path: str, command: str) -> None:
    if Path(in_path).parent.resolve() != Path(out_path).parent.resolve():
        raise UsageError(
            f"{command}: --out must live beside --in; stage artifacts "
            "(masks, candidates) are resolved relative to the manifest directory"
        )


def _summarize(command: str, before: Manifest, after: Manifest) -> dict:
    counts = stage_counts(after)
    newly_rejected: dict[str, int] = {}
    before_by_id = {r.id: r for r in before.records}
    for rec in after.records:
        prior = before_by_id.get(rec.id)
        if not rec.alive and (prior is None or prior.alive):
            newly_rejected[rec.rejection.reason] = (
                newly_rejected.get(rec.rejection.reason, 0) + 1
            )
    return {
        "command": command,
        "input_records": len(before),
        "kept": counts["kept"],
        "rejected_total": counts["rejected"],
        "newly_rejected": dict(sorted(newly_rejected.items())),
    }


def _emit(obj: dict) -> None:
    print(json.dumps(obj, indent=2, sort_keys=False))


# -- stage commands -------------------------------------------------------------


def cmd_verdict(args, cfg: RunConfig, gateway: Gateway) -> int:
    _check_same_dir(args.in_path, args.out, "verdict")
    before = load_manifest(args.in_path)
    _require_stage(before, Stage.RAW, "verdict")
    after = verdict.run_verdict_stage(before, gateway)
    save_manifest(after, args.out)
    _emit(_summarize("verdict", before, after))
    return EXIT_OK


def cmd_ground(args, cfg: RunConfig, gateway: Gateway) -> int:
    _check_same_dir(args.in_path, args.out, "ground")
    before = load_manifest(args.in_path)
    _require_stage(before, Stage.VERDICTED, "ground")
    after = grounding.run_ground_stage(
        before,
        gateway,
        box_threshold=cfg.box_threshold,
        area_bounds=(cfg.area_lo, cfg.area_hi),
    )
    save_manifest(after, args.out)
    _emit(_summarize("ground", before, after))
    return EXIT_OK


def cmd_inpaint(args, cfg: RunConfig, gateway: Gateway) -> int:
    _check_same_dir(args.in_path, args.out, "inpaint")
    before = load_manifest(args.in_path)
    _require_stage(before, Stage.GROUNDED, "inpaint")
    after = rerank.run_inpaint_stage(
        before,
        gateway,
        k=cfg.k,
        base_seed=cfg.seed,
        dilation_radius=cfg.dilation_radius,
    )
    save_manifest(after, args.out)
    _emit(_summarize("inpaint", before, after))
    return EXIT_OK


def cmd_rerank(args, cfg: RunConfig, gateway: Gateway) -> int:
    _check_same_dir(args.in_path, args.out, "rerank")
    before = load_manifest(args.in_path)
    _require_stage(before, Stage.INPAINTED, "rerank")
    after = rerank.run_rerank_stage(before, gateway)
    save_manifest(after, args.out)
    _emit(_summarize("rerank", before, after))
    return EXIT_OK


def cmd_export(args, cfg: RunConfig, gateway: Gateway) -> int:
    _check_same_dir(args.in_path, args.out, "export")
    before = load_manifest(args.in_path)
    _require_stage(before, Stage.SELECTED, "export")
    with_splits = manifest_mod.assign_splits(before, seed=cfg.seed)
    records = manifest_mod.export_training_records(
        with_splits,
        SupervisionMode(cfg.supervision),
        args.out_dir,
        noise_seed=cfg.seed,
        stroke_px=cfg.stroke_px,
    )
    for rec in with_splits.records:
        if rec.alive and rec.stage is Stage.SELECTED:
            rec.advance(Stage.EXPORTED)
    save_manifest(with_splits, args.out)
    summary = _summarize("export", before, with_splits)
    summary["exported"] = len(records)
    summary["out_dir"] = str(args.out_dir)
    _emit(summary)
    return EXIT_OK


def _rebase_record(rec, src_base: Path, dst_base: Path):
    """Repoint a record's relative paths at a new manifest directory."""
    from .types import ImageRef

    out = rec.clone()

    def rel(path: str) -> str:
        return Path(os.path.relpath(Path(src_base) / path, dst_base)).as_posix()

    out.input_path = rel(out.input_path)
    if out.mask_path is not None:
        out.mask_path = rel(out.mask_path)
    if out.candidates is not None:
        out.candidates = [
            ImageRef(path=rel(c.path), digest=c.digest) for c in out.candidates
        ]
    return out


def _training_matrix(args, gateway: Gateway):
    """Load the embedding cache, or compute it from the training manifest once."""
    cache_path = Path(args.train_embeddings) if args.train_embeddings else None
    if cache_path is not None and cache_path.exists():
        return np.stack(list(testset.load_embeddings(cache_path).values()))
    if args.train_manifest:
        train = load_manifest(args.train_manifest)
        embeddings = testset.compute_training_embeddings(train, gateway)
        if not embeddings:
            raise UsageError("training manifest has no live records to embed")
        if cache_path is not None:
            testset.save_embeddings(cache_path, embeddings)
        return np.stack(list(embeddings.values()))
    if cache_path is not None:
        raise UsageError(f"embedding cache {cache_path} does not exist")
    return None


def cmd_testset(args, cfg: RunConfig, gateway: Gateway) -> int:
    source = load_manifest(args.in_path)
    out_base = Path(args.out).parent
    pool = [r for r in source.records if r.alive]
    matrix = _training_matrix(args, gateway)
    if matrix is not None:
        pool = testset.dedup_filter(
            pool, matrix, gateway, source.base_dir, threshold=cfg.sim_threshold
        )
    verbs = [v.strip() for v in cfg.verbs.split(",") if v.strip()]
    chosen = testset.stratified_sample(pool, verbs, cfg.per_verb, seed=cfg.seed)
    records = []
    for rec in chosen:
        rebased = _rebase_record(rec, source.base_dir, out_base)
        rebased.extra["source"] = "indomain"
        records.append(rebased)

    counts = {"indomain": len(records), "magicbrush": 0, "metaphor": 0}
    if args.magicbrush:
        external = load_manifest(args.magicbrush)
        rows = [
            {"instruction": r.instruction, "turns": int(r.extra.get("turns", 1)), "rec": r}
            for r in external.records
            if r.alive
        ]
        for row in testset.magicbrush_filter(rows):
            rebased = _rebase_record(row["rec"], external.base_dir, out_base)
            rebased.extra.pop("turns", None)
            rebased.extra["source"] = "magicbrush"
            records.append(rebased)
            counts["magicbrush"] += 1
    if args.metaphor:
        external = load_manifest(args.metaphor)
        for rec in external.records:
            if not rec.alive:
                continue
            rebased = _rebase_record(rec, external.base_dir, out_base)
            rebased.extra["source"] = "metaphor"
            records.append(rebased)
            counts["metaphor"] += 1

    save_manifest(Manifest(records=records, base_dir=out_base), args.out)
    _emit(
        {
            "command": "testset",
            "pool": len(pool),
            "selected": len(records),
            "by_source": counts,
            "per_verb": cfg.per_verb,
            "verbs": verbs,
        }
    )
    return EXIT_OK


def cmd_eval_tifa(args, cfg: RunConfig, gateway: Gateway) -> int:
    m = load_manifest(args.in_path)
    results = {}
    for spec in args.outputs:
        if "=" not in spec:
            raise UsageError(f"--outputs expects system=dir, got {spec!r}")
        system, out_dir = spec.split("=", 1)
        outputs = {
            p.stem: p for p in sorted(Path(out_dir).glob("*.png"))
        }
        results[system] = evalharness.tifa_corpus(m, outputs, gateway)
    report = {
        system: {"mean": r["mean"], "per_image": r["per_image"], "missing": r["missing"]}
        for system, r in results.items()
    }
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2), encoding="utf-8")
    _emit(report)
    return EXIT_OK


def cmd_eval_human(args, cfg: RunConfig, gateway: Gateway) -> int:
    table = evalharness.load_ratings(args.ratings)
    report = {
        "h_score": evalharness.h_score(table),
        "krippendorff_alpha_nominal": evalharness.krippendorff_alpha(table, "nominal"),
        "krippendorff_alpha_ordinal": evalharness.krippendorff_alpha(table, "ordinal"),
        "metric_requested": cfg.metric,
        "alpha": evalharness.krippendorff_alpha(table, cfg.metric),
    }
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2), encoding="utf-8")
    _emit(report)
    return EXIT_OK


def cmd_stats(args, cfg: RunConfig, gateway: Gateway) -> int:
    m = load_manifest(args.in_path)
    report = stage_counts(m)
    areas = []
    for rec in m.records:
        if rec.mask_path:
            try:
                mask = images.load_mask(Path(m.base_dir) / rec.mask_path)
                areas.append(mask.area_fraction)
            except OSError:
                continue
    if areas:
        report["mask_area_fraction"] = {
            "count": len(areas),
            "min": min(areas),
            "mean": sum(areas) / len(areas),
            "max": max(areas),
        }
    _emit(report)
    return EXIT_OK


def cmd_run_all(args, cfg: RunConfig, gateway: Gateway) -> int:
    base = Path(args.in_path).parent
    stem = Path(args.in_path).stem
    paths = {name: base / f"{stem}.{name}.jsonl" for name in ("verdict", "ground", "inpaint", "rerank")}

    current = load_manifest(args.in_path)
    _require_stage(current, Stage.RAW, "run-all")
    current = verdict.run_verdict_stage(current, gateway)
    save_manifest(current, paths["verdict"])
    current = grounding.run_ground_stage(
        current, gateway, cfg.box_threshold, (cfg.area_lo, cfg.area_hi)
    )
    save_manifest(current, paths["ground"])
    current = rerank.run_inpaint_stage(
        current, gateway, k=cfg.k, base_seed=cfg.seed, dilation_radius=cfg.dilation_radius
    )
    save_manifest(current, paths["inpaint"])
    current = rerank.run_rerank_stage(current, gateway)
    save_manifest(current, paths["rerank"])
    current = manifest_mod.assign_splits(current, seed=cfg.seed)
    manifest_mod.export_training_records(
        current,
        SupervisionMode(cfg.supervision),
        args.out_dir,
        noise_seed=cfg.seed,
        stroke_px=cfg.stroke_px,
    )
    for rec in current.records:
        if rec.alive and rec.stage is Stage.SELECTED:
            rec.advance(Stage.EXPORTED)
    save_manifest(current, args.out)
    counts = stage_counts(current)
    counts["command"] = "run-all"
    _emit(counts)
    return EXIT_OK


# -- wiring --------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser, manifest_io: bool = True) -> None:
    parser.add_argument("--config", default=None, help="key = value config file")
    parser.add_argument("--seed", type=int, default=None)
    if manifest_io:
        parser.add_argument("--in", dest="in_path", required=True)
        parser.add_argument("--out", required=True)


def build_parser() -> _Parser:
    parser = _Parser(prog="editpipe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verdict", help="feasibility-filter raw records")
    _add_common(p)
    p.set_defaults(func=cmd_verdict)

    p = sub.add_parser("ground", help="detect and segment the edit entity")
    _add_common(p)
    p.add_argument("--box-threshold", type=float, dest="box_threshold", default=None)
    p.set_defaults(func=cmd_ground)

    p = sub.add_parser("inpaint", help="generate edit candidates")
    _add_common(p)
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("rerank", help="score candidates with VQA and select")
    _add_common(p)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("export", help="assign splits and write training records")
    _add_common(p)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument(
        "--supervision", choices=[m.value for m in SupervisionMode], default=None
    )
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("testset", help="curate the test set from all sources")
    _add_common(p)
    p.add_argument("--sim-threshold", type=float, dest="sim_threshold", default=None)
    p.add_argument("--per-verb", type=int, dest="per_verb", default=None)
    p.add_argument("--verbs", default=None)
    p.add_argument(
        "--train-embeddings",
        dest="train_embeddings",
        default=None,
        help="embedding cache file; written when --train-manifest is given",
    )
    p.add_argument(
        "--train-manifest",
        dest="train_manifest",
        default=None,
        help="training manifest to embed for similarity dedup",
    )
    p.add_argument("--magicbrush", default=None, help="manifest of single/multi-turn records")
    p.add_argument("--metaphor", default=None, help="manifest of visual-metaphor records")
    p.set_defaults(func=cmd_testset)

    p = sub.add_parser("eval-tifa", help="reference-free faithfulness scores")
    _add_common(p, manifest_io=False)
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--outputs", nargs="+", required=True, help="system=dir pairs")
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_eval_tifa)

    p = sub.add_parser("eval-human", help="H-score and Krippendorff's alpha")
    _add_common(p, manifest_io=False)
    p.add_argument("--ratings", required=True)
    p.add_argument("--metric", choices=["nominal", "ordinal"], default=None)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_eval_human)

    p = sub.add_parser("stats", help="stage and rejection histograms")
    _add_common(p, manifest_io=False)
    p.add_argument("--in", dest="in_path", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("run-all", help="chain verdict through export")
    _add_common(p)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument(
        "--supervision", choices=[m.value for m in SupervisionMode], default=None
    )
    p.add_argument("--box-threshold", type=float, dest="box_threshold", default=None)
    p.set_defaults(func=cmd_run_all)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = RunConfig.load(getattr(args, "config", None)).apply_flags(args)
        gateway = make_gateway(cfg)
        return args.func(args, cfg, gateway)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        raise
    except Exception as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE_FAILURE


if __name__ == "__main__":
    sys.exit(main())
