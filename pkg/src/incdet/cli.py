"""Command-line interface: ``incdet <subcommand> ...``.

Config files are UTF-8 JSON. Values given as flags override the config file,
which overrides built-in defaults; the effective settings are echoed to
stderr at startup. Failures print one line ``incdet: error[<code>] <kind>: <message>``
to stderr and exit with 2 (configuration), 3 (data) or 4 (numerical).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .core import Box, ClassPartition, Detection, parse_class_ids
from .data import (
    DataError,
    Dataset,
    SyntheticConfig,
    audit_cooccurrence,
    build_incremental_splits,
    dataset_from_dict,
    dataset_to_dict,
    export_annotations,
    generate_synthetic,
    load_annotations,
    split_manifest,
)
from .distill import DistillHyper, NumericalError
from .metrics import evaluate_detections
from .sampler import SampleResult, SamplerConfig, SamplingError, blind_sample, dataset_images
from .train import ExperimentPlan, TrainConfig, distill_student, evaluate_model, render_report, run_plan, train_detector

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # single-line errors instead of usage dumps
        raise ConfigError(message)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc


def _config(args) -> dict:
    return _read_json(args.config) if getattr(args, "config", None) else {}


def _write_json(path, doc) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _echo(args, **effective) -> None:
    print(f"incdet {args.command}: " + json.dumps(effective, sort_keys=True, default=str), file=sys.stderr)


def _seeded(section: dict, args) -> dict:
    return {**section, "seed": args.seed} if args.seed is not None else dict(section)


def _load_dataset(path) -> Dataset:
    path = Path(path)
    if path.is_dir():
        path = path / "annotations.json"
    if not path.is_file():
        raise FileNotFoundError(f"no such dataset: {path}")
    return load_annotations(path)


def _partition(text: str, ds: Dataset | None = None) -> ClassPartition:
    try:
        return ClassPartition.parse(text, ds.categories if ds is not None else None)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad partition {text!r}: {exc}") from exc


def _class_ids(text: str, ds: Dataset | None = None) -> tuple[int, ...]:
    try:
        ids = parse_class_ids(text, ds.categories if ds is not None else None)
    except ValueError as exc:
        raise ConfigError(f"bad class list {text!r}: {exc}") from exc
    if not ids or len(set(ids)) != len(ids):
        raise ConfigError(f"class list {text!r} must be non-empty without repeats")
    return ids


def _wild_source(path) -> Dataset:
    """Annotation JSON (labels ignored), a directory holding one, or a directory of PNGs."""
    path = Path(path)
    if path.is_file() or (path / "annotations.json").is_file():
        ds = _load_dataset(path)
        return ds.subset([replace(im, gt=[]) for im in ds.images])
    if not path.is_dir():
        raise FileNotFoundError(f"no such wild source: {path}")
    from PIL import Image

    files = sorted(path.glob("*.png"))
    if not files:
        raise DataError(f"{path} holds no annotations.json and no PNG files")
    images = []
    for i, f in enumerate(files):
        with Image.open(f) as im:
            w, h = im.size
        images.append({"id": i, "width": w, "height": h, "file_name": f.name})
    return dataset_from_dict({"categories": [], "images": images, "annotations": []}, root=path)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    synth = _seeded(cfg.get("synthetic", {}), args)
    n = args.n if args.n is not None else int(cfg.get("n_images", 100))
    scfg = SyntheticConfig.from_dict(synth)
    _echo(args, synthetic=scfg.to_dict(), n_images=n, png=args.png)
    ds = generate_synthetic(scfg, n)
    out = Path(args.out)
    if args.png:
        from PIL import Image

        (out / "img").mkdir(parents=True, exist_ok=True)
        images = []
        for im in ds.images:
            name = f"img/{im.image_id:06d}.png"
            pixels = (np.clip(ds.load_image(im), 0, 1) * 255).round().astype(np.uint8).transpose(1, 2, 0)
            Image.fromarray(pixels).save(out / name)
            images.append(replace(im, file_name=name, recipe=None))
        ds = ds.subset(images)
    export_annotations(ds, out / "annotations.json")
    _write_json(
        out / "manifest.json",
        {"config": scfg.to_dict(), "n_images": n, "seed": scfg.seed, "object_counts": dict(sorted(ds.object_counts().items()))},
    )
    print(f"wrote {n} images to {out}")


def cmd_audit(args) -> None:
    ds = _load_dataset(args.dataset)
    partition = _partition(args.partition, ds)
    _echo(args, dataset=args.dataset, partition=partition.to_dict())
    table = audit_cooccurrence(ds, partition)
    print(table.render())
    if args.out:
        _write_json(args.out, table.to_dict())


def cmd_split(args) -> None:
    ds = _load_dataset(args.dataset)
    partition = _partition(args.partition, ds)
    _echo(args, dataset=args.dataset, partition=partition.to_dict(), strict=args.strict)
    base, novels = build_incremental_splits(ds, partition, args.strict)
    out = Path(args.out)
    root = Path(args.dataset).resolve()
    root = root if root.is_dir() else root.parent
    for split in [base, *novels]:
        doc = dataset_to_dict(split)
        for im in doc["images"]:
            if "file_name" in im and not Path(im["file_name"]).is_absolute():
                im["file_name"] = str(root / im["file_name"])
        _write_json(out / f"{split.info['split']}.json", doc)
    _write_json(out / "splits.json", split_manifest(partition, args.strict, [base, *novels], args.seed))
    print(" ".join(f"{s.info['split']}={len(s)}" for s in [base, *novels]))


def cmd_train(args) -> None:
    cfg = _config(args)
    tcfg = TrainConfig.from_dict(_seeded(cfg.get("train", {}), args))
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    ds = _load_dataset(args.dataset)
    class_ids = _class_ids(args.classes, ds)
    _echo(args, train=tcfg.to_dict(), detector=cfg.get("detector", {}), classes=class_ids)
    det = train_detector(ds, class_ids, tcfg, cfg.get("detector"))
    save_checkpoint(det, args.out, {"seed": tcfg.seed, "train": tcfg.to_dict(), "history": det.train_history})
    print(f"saved {args.out}  final loss {det.train_history[-1]:.4f}")


def cmd_sample(args) -> None:
    cfg = _config(args)
    scfg = SamplerConfig.from_dict(_seeded(cfg.get("sampler", {}), args))
    m_base, m_novel = load_checkpoint(args.base), load_checkpoint(args.novel)
    wild = _wild_source(args.wild)
    _echo(args, sampler=scfg.to_dict(), wild=args.wild, n_wild=len(wild))
    result = blind_sample(m_base, m_novel, dataset_images(wild), scfg)
    doc = result.manifest()
    doc["wild_source"] = str(Path(args.wild).resolve())
    doc["seed"] = scfg.seed
    _write_json(args.out, doc)
    print(f"selected {len(result.selected)}/{result.n_wild}  base entries {result.count('base')}  novel entries {result.count('novel')}")


def cmd_distill(args) -> None:
    cfg = _config(args)
    tcfg = TrainConfig.from_dict(_seeded(cfg.get("train", {}), args))
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    hyper = DistillHyper.from_dict(cfg.get("hyper", {}))
    doc = _read_json(args.manifest)
    try:
        sampled = SampleResult.from_manifest(doc)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{args.manifest}: malformed sampling manifest ({exc})") from exc
    wild_path = args.wild or doc.get("wild_source")
    if wild_path is None:
        raise ConfigError("manifest records no wild source; pass --wild")
    wild = _wild_source(wild_path)
    m_base, m_novel = load_checkpoint(args.base), load_checkpoint(args.novel)
    k = int(cfg.get("k_per_teacher", 16))
    _echo(args, train=tcfg.to_dict(), hyper=hyper.to_dict(), k_per_teacher=k, wild=wild_path)
    missing = set(sampled.selected) - set(wild.by_id())
    if missing:
        raise DataError(f"manifest selects images absent from the wild source: {sorted(missing)[:5]}")
    student = distill_student(m_base, m_novel, wild, sampled, tcfg, hyper, k)
    save_checkpoint(student, args.out, {"seed": tcfg.seed, "train": tcfg.to_dict(), "hyper": hyper.to_dict()})
    print(f"saved {args.out}  classes {list(student.class_ids)}")


def _detections_from_json(path) -> dict:
    doc = _read_json(path)
    out: dict[int, list[Detection]] = {}
    try:
        for d in doc["detections"]:
            out.setdefault(int(d["image_id"]), []).append(
                Detection(Box(*map(float, d["bbox"])), int(d["category_id"]), float(d["score"]))
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed detection entry ({exc})") from exc
    return out


def cmd_eval(args) -> None:
    if (args.model is None) == (args.detections is None):
        raise ConfigError("give exactly one of --model or --detections")
    ds = _load_dataset(args.dataset)
    partition = _partition(args.partition, ds)
    _echo(args, dataset=args.dataset, partition=partition.to_dict(), style=args.style)
    if args.model is not None:
        report = evaluate_model(load_checkpoint(args.model), ds, partition, args.style)
    else:
        dets = _detections_from_json(args.detections)
        gts = {im.image_id: im.gt for im in ds.images}
        report = evaluate_detections(dets, gts, partition, args.style)
    report["seed"] = args.seed
    print(report["base_novel_all"]["text"])
    if args.out:
        _write_json(args.out, report)


def cmd_run_plan(args) -> None:
    plan_path = Path(args.plan)
    if args.plan.startswith("preset:"):
        from . import preset_path

        plan_path = preset_path(args.plan.split(":", 1)[1])
    doc = _read_json(plan_path)
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        plan = ExperimentPlan.from_dict(doc)
    except TypeError as exc:
        raise ConfigError(f"{args.plan}: {exc}") from exc
    out = Path(args.out) if args.out else Path("runs") / plan_path.stem
    _echo(args, plan=plan.to_dict(), out=str(out))
    _write_json(out / "plan.json", plan.to_dict())
    results = run_plan(plan, out_dir=out, progress=lambda m: print(m, file=sys.stderr))
    for r in results:
        print(render_report(r.report))


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="overrides every seed in the config")
    common.add_argument("--workers", type=int, default=1, help="torch intra-op threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="incdet", description="Class-incremental detection with blind sampling and dual-teacher distillation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="write a synthetic shapes dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=None, help="number of images (overrides n_images)")
    s.add_argument("--png", action="store_true", help="write PNG files instead of render recipes")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("audit", parents=[common], help="print co-occurrence counts per split")
    s.add_argument("--dataset", required=True)
    s.add_argument("--partition", required=True, help='e.g. "0,1,2+3" or "0-9+10-14+15-19"')
    s.add_argument("--out", default=None, help="optional JSON copy of the table")
    s.set_defaults(func=cmd_audit)

    s = sub.add_parser("split", parents=[common], help="write incremental split annotation files")
    s.add_argument("--dataset", required=True)
    s.add_argument("--partition", required=True)
    s.add_argument("--strict", action="store_true", help="drop images carrying labels of two sides")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", parents=[common], help="train a teacher detector")
    s.add_argument("--dataset", required=True)
    s.add_argument("--classes", required=True, help='e.g. "0,1,2" or "0-9"')
    s.add_argument("--config", default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common], help="blind-sample wild images with two teachers")
    s.add_argument("--base", required=True)
    s.add_argument("--novel", required=True)
    s.add_argument("--wild", required=True, help="annotation JSON, or a directory with annotations.json or PNGs")
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("distill", parents=[common], help="distill a student from two teachers")
    s.add_argument("--base", required=True)
    s.add_argument("--novel", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--wild", default=None, help="defaults to the source recorded in the manifest")
    s.add_argument("--config", default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("eval", parents=[common], help="base | novel | all report")
    s.add_argument("--model", default=None)
    s.add_argument("--detections", default=None, help='JSON {"detections": [{image_id, category_id, bbox, score}]}')
    s.add_argument("--dataset", required=True)
    s.add_argument("--partition", required=True)
    s.add_argument("--style", choices=("voc", "coco"), default="voc")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("run-plan", parents=[common], help="run a full incremental experiment plan")
    s.add_argument("--plan", required=True, help='plan JSON, or "preset:<name>" for a shipped plan')
    s.add_argument("--out", default=None, help="output directory (default runs/<plan name>)")
    s.set_defaults(func=cmd_run_plan)
    return p


def _fail(code: int, kind: str, message: str) -> int:
    print(f"incdet: error[{code}] {kind}: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "usage", exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    if args.workers < 1:
        return _fail(EXIT_CONFIG, "config", "--workers must be >= 1")
    torch.set_num_threads(args.workers)
    try:
        args.func(args)
    except NumericalError as exc:
        return _fail(EXIT_NUMERICAL, "numerical", exc)
    except (DataError, FileNotFoundError, CheckpointError, SamplingError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except (ConfigError, ValueError, TypeError, KeyError) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
