"""Command line entry points."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import dataset as ds
from .curation import CurationConfig, curate, write_manifest
from .evaluation import GroundTruthItem, SegMetrics, detection_metrics, seg_metrics
from .fusion import FusionConfig
from .gateway import ExpertKind, Gateway, load_roster, mock_roster
from .geometry import BinaryMask, DefectCategory, RasterImage, mask_union
from .memory import DEFAULT_DIM, BankError, QuerySpec, load, open_bank
from .orchestrator import (
    PlanError,
    ProfileError,
    RunConfig,
    RunInterrupted,
    execute,
    interpret_profile,
    plan,
    plan_via_endpoint,
)
from .recomposition import recompose_cycle

logger = logging.getLogger("facadefixer")


def _read_yaml(path: Optional[str]) -> dict:
    if not path:
        return {}
    data = yaml.safe_load(Path(path).read_text())
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping at top level")
    return data


def _gateway(experts: Optional[str], dim: int) -> Gateway:
    roster = load_roster(experts) if experts else mock_roster(dim=dim)
    return Gateway(roster)


def _bank_dim(path: str, fallback: int) -> int:
    manifest = Path(path) / "manifest.json"
    if manifest.exists():
        return int(json.loads(manifest.read_text())["dim"])
    return fallback


def _embedder(gw: Gateway, dim: int):
    d = gw.first(ExpertKind.EMBEDDER)
    if d is None:
        raise ValueError("expert roster has no embedder")
    return lambda item: gw.embed(item, d, dim=dim)


def _run_config(data: dict, dataset: Path) -> RunConfig:
    known = {"fusion", "curation", "dilation_radius", "alpha", "feather", "max_workers", "fallback"}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown run settings: {sorted(unknown)}")
    kw = {k: data[k] for k in ("dilation_radius", "alpha", "feather", "max_workers") if k in data}
    if "fallback" in data:
        kw["fallback"] = dict(data["fallback"])
    return RunConfig(
        dataset,
        fusion=FusionConfig.from_dict(data.get("fusion")),
        curation=CurationConfig.from_dict(data.get("curation")),
        **kw,
    )


# -- commands ---------------------------------------------------------------


def cmd_inspect(args) -> int:
    raw = _read_yaml(args.profile)
    if args.seed is not None:
        raw["seed"] = args.seed
    profile = interpret_profile(raw)
    dim = _bank_dim(args.bank, args.dim)
    bank = open_bank(args.bank, dim=dim)
    gw = _gateway(args.experts, bank.dim)
    dataset = Path(args.dataset) if args.dataset else ds.bundled_fixtures()
    config = _run_config(_read_yaml(args.config), dataset)
    if args.halt_after:
        config.halt_after = frozenset(args.halt_after)
    judge = gw.first(ExpertKind.ADJUDICATOR)
    with gw:
        task_plan = plan_via_endpoint(profile, judge, gw) if args.agent_plan and judge else plan(profile)
        try:
            report = execute(task_plan, gw, bank, config, args.out, resume=not args.fresh)
        except RunInterrupted as exc:
            print(f"interrupted: {exc}", file=sys.stderr)
            return 3
    for nid in task_plan.ids:
        line = f"{nid:10s} {report.status[nid]}"
        if nid in report.errors:
            line += f"  {report.errors[nid]}"
        print(line)
    print(f"digest {report.digest()}")
    return 0 if "failed" not in report.status.values() else 1


def _category_masks(instances) -> dict:
    grouped: dict[DefectCategory, list[BinaryMask]] = {}
    for inst in instances:
        if inst.mask is not None:
            grouped.setdefault(inst.category, []).append(inst.mask)
    return {c: mask_union(ms) for c, ms in grouped.items()}


def cmd_evaluate(args) -> int:
    gt_dir, pred_dir = Path(args.gt), Path(args.pred)
    predictions, truths, seg_rows = [], [], []
    missing = []
    for ann in ds.iter_annotations(gt_dir):
        iid = ann.image.id
        truths += [GroundTruthItem(iid, i.box, i.category, i.mask) for i in ann.instances]
        path = pred_dir / f"{iid}.json"
        if not path.exists():
            missing.append(iid)
            continue
        pred = ds.read_sidecar(path)
        predictions += pred.detections(source="pred")
        gt_masks = _category_masks(ann.instances)
        pred_masks = _category_masks(pred.instances)
        if gt_masks and pred_masks:
            seg_rows.append(seg_metrics(pred_masks, gt_masks))
    if not truths and not missing:
        print(f"no ground truth sidecars in {gt_dir}", file=sys.stderr)
        return 2
    if missing:
        logger.warning("no predictions for %d image(s): %s", len(missing), ", ".join(missing))

    det = detection_metrics(predictions, truths).as_row()
    result: dict = {"detection": det, "segmentation": None, "missing_predictions": missing}
    if seg_rows:
        keys = ("miou", "precision", "recall", "f1", "pixel_accuracy")
        mean = SegMetrics(*(float(np.mean([getattr(r, k) for r in seg_rows])) for k in keys))
        result["segmentation"] = mean.as_row()

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stem = out.with_suffix("")
    stem.with_suffix(".json").write_text(json.dumps(result, indent=2))
    _write_row(stem.with_suffix(".csv"), args.method, det)
    if result["segmentation"]:
        _write_row(Path(f"{stem}.seg.csv"), args.method, result["segmentation"])
    for name, value in det.items():
        print(f"{name:10s} {value:.4f}")
    return 0


def _write_row(path: Path, method: str, row: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Method", *row])
        w.writerow([method, *(f"{v:.4f}" for v in row.values())])


def cmd_recompose(args) -> int:
    bank = open_bank(args.bank, dim=_bank_dim(args.bank, args.dim))
    gw = _gateway(args.experts, bank.dim)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    with gw:
        for ann in ds.iter_annotations(args.input):
            image, _ = ds.load_image(args.input, ann.image.id)
            with_masks = [i for i in ann.instances if i.mask is not None and not i.mask.is_empty()]
            if not with_masks:
                records.append({"image_id": ann.image.id, "status": "skipped", "reason": "no instance masks"})
                continue
            dets = ann.detections()
            cycle = recompose_cycle(image, dets, [i.mask for i in with_masks], bank, gw, args.seed, ann.image.id,
                                    radius=args.radius, feather=args.feather)
            for rec in cycle.records:
                records.append({"image_id": ann.image.id, **rec})
            for sample in cycle.samples:
                insts = [ds.Instance(i.mask.bbox(), i.category, None, i.mask) for i in sample.instances
                         if not i.mask.is_empty()]
                ds.write_sample(out, sample.digest(), sample.image, insts)
    (out / "records.json").write_text(json.dumps(records, indent=2, sort_keys=True))
    archived = sum(r.get("status") == "archived" for r in records)
    print(f"{len(records)} records, {archived} archived, bank now holds {len(bank)} entries")
    return 0


def cmd_curate(args) -> int:
    cfg = CurationConfig.load(args.config) if args.config else CurationConfig()
    gw = _gateway(args.experts, args.dim)
    embed = _embedder(gw, args.dim)
    images = [(iid, ds.load_image(args.input, iid)[0]) for iid in ds.image_ids(args.input)]
    with gw:
        result = curate(images, cfg, embed, embed)
    write_manifest(result, args.out)
    print(f"kept {len(result.kept)} of {len(images)}")
    for iid, reason in sorted(result.dropped.items()):
        print(f"  drop {iid}: {reason}")
    return 0


def cmd_bank_add(args) -> int:
    bank = open_bank(args.bank, dim=_bank_dim(args.bank, args.dim))
    gw = _gateway(args.experts, bank.dim)
    source = Path(args.source) if args.source else ds.bundled_fixtures()
    with gw:
        added = ds.seed_bank(bank, source, _embedder(gw, bank.dim))
    print(f"added {len(added)} entries, bank holds {len(bank)}")
    return 0


def cmd_bank_query(args) -> int:
    bank = load(args.bank)
    gw = _gateway(args.experts, bank.dim)
    embed = _embedder(gw, bank.dim)
    with gw:
        vec = embed(args.text) if args.text is not None else embed(RasterImage.load(args.image))
    hits = bank.query_top_k(QuerySpec(vec, k=args.k, category=args.category))
    rows = [{"id": e.id, "score": round(s, 6), "category": e.category.value, "provenance": e.provenance.value}
            for e, s in hits]
    print(json.dumps(rows, indent=2))
    return 0


def cmd_bank_stats(args) -> int:
    print(json.dumps(load(args.bank).stats(), indent=2))
    return 0


def cmd_fixtures(args) -> int:
    ids = ds.write_synthetic_set(args.out, n=args.n)
    print(f"wrote {len(ids)} images to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="facadefixer", description="Facade defect inspection toolkit.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def experts(sp):
        sp.add_argument("--experts", help="expert roster (YAML/JSON); defaults to the all-mock roster")
        sp.add_argument("--dim", type=int, default=DEFAULT_DIM, help="embedding dimension for a new bank")

    sp = sub.add_parser("inspect", help="plan and run a pipeline from an instruction profile")
    sp.add_argument("--profile", required=True)
    sp.add_argument("--bank", required=True)
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--dataset", help="image directory; defaults to the bundled synthetic set")
    sp.add_argument("--config", help="run settings (fusion, curation, blending)")
    sp.add_argument("--agent-plan", action="store_true", help="ask the adjudicator endpoint for the plan")
    sp.add_argument("--fresh", action="store_true", help="ignore checkpoints in the run directory")
    sp.add_argument("--halt-after", action="append", metavar="NODE", help=argparse.SUPPRESS)
    experts(sp)
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("evaluate", help="score predictions against ground truth sidecars")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True, help="metrics file; .json and .csv are written side by side")
    sp.add_argument("--method", default="prediction", help="row label in the CSV table")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("recompose", help="synthesize augmented samples from annotated images")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--bank", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--radius", type=int, default=2)
    sp.add_argument("--feather", type=int, default=2)
    experts(sp)
    sp.set_defaults(func=cmd_recompose)

    sp = sub.add_parser("curate", help="dedup, clutter-filter and quality-gate an image folder")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    experts(sp)
    sp.set_defaults(func=cmd_curate)

    bank = sub.add_parser("bank", help="memory bank maintenance")
    bsub = bank.add_subparsers(dest="bank_command", required=True)
    sp = bsub.add_parser("add", help="add annotated instances as real entries")
    sp.add_argument("--bank", required=True)
    sp.add_argument("--from", dest="source", help="annotated image directory; defaults to the bundled set")
    experts(sp)
    sp.set_defaults(func=cmd_bank_add)
    sp = bsub.add_parser("query", help="nearest entries to an image or text")
    sp.add_argument("--bank", required=True)
    q = sp.add_mutually_exclusive_group(required=True)
    q.add_argument("--image")
    q.add_argument("--text")
    sp.add_argument("-k", type=int, default=5)
    sp.add_argument("--category")
    experts(sp)
    sp.set_defaults(func=cmd_bank_query)
    sp = bsub.add_parser("stats")
    sp.add_argument("--bank", required=True)
    sp.set_defaults(func=cmd_bank_stats)

    sp = sub.add_parser("fixtures", help="write the synthetic facade set")
    sp.add_argument("--out", required=True)
    sp.add_argument("-n", type=int, default=10)
    sp.set_defaults(func=cmd_fixtures)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ProfileError, PlanError, BankError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
