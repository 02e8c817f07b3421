"""Command-line entry point: ``python -m cafusion <command> ...``.

Every command accepts ``--config run.json`` (sections ``synth``, ``extract``,
``train``, ``grid``), ``--seed`` and ``--out``; explicit flags win over the
JSON.  Each run writes ``manifest.json`` next to its outputs.

Exit codes: 0 success, 1 invalid input or configuration, 2 failure while running.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import re
import sys
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ConfigError, TrainConfig, from_dict, to_dict
from .data import rle
from .data.bundle_io import BundleFormatError, read_bundle_file, write_bundle_file
from .data.bundles import split_by_patient
from .data.extract import ExtractorConfig, extract_concepts
from .data.synth import SynthSpec, generate_synthetic
from .evaluation import evaluate, export_overlays, image_name, interpret_many, localization, run_grid
from .gradcheck import run_suite
from .training import TrainedModel, train

log = logging.getLogger("cafusion")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
_NAME = re.compile(r"p(\d+)_i(\d+)\.png$")


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class GridConfig:
    variants: tuple[str, ...] = ("ours", "global_only", "local_only", "concat1", "concat2", "avg_sum")
    ratios: tuple[float, ...] = (0.5,)
    k_values: tuple[int, ...] = (5,)
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass
class RunConfig:
    synth: SynthSpec = field(default_factory=SynthSpec)
    extract: ExtractorConfig = field(default_factory=ExtractorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    explicit: dict = field(default_factory=dict)  # keys the user actually set, per section

    _SECTIONS = {"synth": SynthSpec, "extract": ExtractorConfig, "train": TrainConfig, "grid": GridConfig}

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        unknown = sorted(set(doc) - set(cls._SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
        parts = {name: from_dict(kind, doc.get(name)) for name, kind in cls._SECTIONS.items()}
        explicit = {name: set(doc.get(name) or {}) | set((doc.get(name) or {}).get("model") or {})
                    for name in cls._SECTIONS}
        return cls(**parts, explicit=explicit)

    def to_json(self) -> dict:
        return {name: to_dict(getattr(self, name)) for name in self._SECTIONS}


# ----------------------------------------------------------------- helpers


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for dist in ("numpy", "scipy", "Pillow", "artifact"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = None
    return out


def write_manifest(out_dir: Path, command: str, argv: list[str], config: dict, seed: int | None) -> Path:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "config_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": seed,
        "versions": _versions(),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _need_file(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {p}")
    return p


def _need_dir(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} directory not found: {p}")
    return p


def _train_config(run: RunConfig, args, bundles) -> TrainConfig:
    changes = {}
    for flag, key in (("seed", "seed"), ("ratio", "split_ratio"), ("epochs", "epochs"), ("lr", "learning_rate"),
                      ("k", "k"), ("variant", "variant"), ("n_concepts", "n_concepts")):
        value = getattr(args, flag, None)
        if value is not None:
            changes[key] = value
    d_in = _bundle_d_in(bundles)
    if "d_in" in run.explicit.get("train", ()) and run.train.model.d_in != d_in:
        raise ConfigError(f"config sets d_in={run.train.model.d_in} but the bundles carry d_in={d_in}")
    changes["d_in"] = d_in
    return run.train.replace(**changes)


def _bundle_d_in(bundles) -> int:
    g = bundles[0].global_source
    return int(g.shape[0]) if g.ndim == 1 else 0


def _read_bundles(path: Path):
    bundles = read_bundle_file(path)
    if not bundles:
        raise ConfigError(f"{path} holds no records")
    return bundles


def _split_of(bundles, which: str, ratio: float, seed: int):
    if which == "all":
        return bundles
    tr, va = split_by_patient(bundles, ratio, seed)
    return tr if which == "train" else va


def _load_truth(path) -> dict[int, tuple]:
    doc = json.loads(Path(path).read_text())
    return {int(r["image_id"]): tuple(r["lesion_bbox"]) for r in doc}


# ---------------------------------------------------------------- commands


def cmd_synth(args, run: RunConfig) -> int:
    spec = run.synth
    if args.seed is not None:
        spec = from_dict(SynthSpec, {**to_dict(spec), "seed": args.seed})
    out = Path(args.out)
    samples = generate_synthetic(spec)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    from PIL import Image

    truth = []
    for s in samples:
        t = s.truth
        Image.fromarray(np.round(s.image * 255.0).astype(np.uint8)).save(img_dir / image_name(t.patient_id, t.image_id))
        truth.append({
            "patient_id": t.patient_id, "image_id": t.image_id, "label": t.label,
            "lesion_bbox": list(s.lesion_bbox), "lesion_rle": [int(v) for v in t.concepts[0].mask_rle],
            "distractor_bboxes": [list(b) for b in s.distractor_bboxes],
        })
    (out / "groundtruth.json").write_text(json.dumps(truth, indent=1) + "\n")
    bundles = [extract_concepts(s.image, run.extract, s.truth.patient_id, s.truth.image_id, s.truth.label)
               for s in samples]
    write_bundle_file(bundles, out / "bundles.cafb")
    write_manifest(out, "synth", args.argv, {"synth": to_dict(spec), "extract": to_dict(run.extract)}, spec.seed)
    print(f"wrote {len(samples)} images, groundtruth.json and bundles.cafb to {out}")
    return EXIT_OK


def cmd_extract(args, run: RunConfig) -> int:
    from PIL import Image

    img_dir = _need_dir(args.images, "images")
    labels = {}
    if args.groundtruth:
        gt = json.loads(_need_file(args.groundtruth, "groundtruth").read_text())
        labels = {(int(r["patient_id"]), int(r["image_id"])): int(r["label"]) for r in gt}
    files = sorted(img_dir.glob("*.png"))
    if not files:
        raise UsageError(f"no PNG images in {img_dir}")
    bundles = []
    for i, f in enumerate(files):
        m = _NAME.search(f.name)
        pid, iid = (int(m.group(1)), int(m.group(2))) if m else (i, i)
        image = np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / np.float32(255.0)
        bundles.append(extract_concepts(image, run.extract, pid, iid, labels.get((pid, iid), -1)))
    bundles.sort(key=lambda b: b.image_id)
    out = Path(args.out)
    write_bundle_file(bundles, out / "bundles.cafb")
    write_manifest(out, "extract", args.argv, {"extract": to_dict(run.extract)}, None)
    print(f"extracted {sum(b.n_real for b in bundles)} concepts from {len(bundles)} images")
    return EXIT_OK


def cmd_train(args, run: RunConfig) -> int:
    data = _need_file(args.data, "data")
    resume = checkpoint.load(_need_file(args.resume, "resume")) if args.resume else None
    bundles = _read_bundles(data)
    config = _train_config(run, args, bundles)
    if any(b.label < 0 for b in bundles):
        raise ConfigError("training needs labelled bundles (found label -1)")
    tr, va = split_by_patient(bundles, config.split_ratio, config.seed)
    out = Path(args.out)
    write_manifest(out, "train", args.argv, {"train": to_dict(config), "data": str(data)}, config.seed)
    result = train(tr, va, config, out_dir=out, resume=resume)
    s = result.state
    print(f"best validation accuracy {s.best_val_accuracy:.4f} at epoch {s.best_epoch}; checkpoint in {out}")
    return EXIT_OK


def cmd_eval(args, run: RunConfig) -> int:
    ck = _need_file(args.checkpoint, "checkpoint")
    data = _need_file(args.data, "data")
    model = TrainedModel.load(ck, best=not args.last)
    bundles = _read_bundles(data)
    cfg = model.config
    subset = _split_of(bundles, args.split, cfg.split_ratio, cfg.seed)
    rep = evaluate(model, subset, args.average)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {**rep.summary(), "count": rep.count,
               "per_class": {"precision": rep.precision.tolist(), "recall": rep.recall.tolist(), "f1": rep.f1.tolist()}}
    (out / "metrics.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    (out / "confusion.json").write_text(json.dumps(rep.confusion.tolist()) + "\n")
    write_manifest(out, "eval", args.argv, {"train": to_dict(cfg), "split": args.split, "average": args.average},
                   cfg.seed)
    print(" ".join(f"{k}={v:.4f}" for k, v in rep.summary().items()))
    return EXIT_OK


def cmd_ablate(args, run: RunConfig) -> int:
    data = _need_file(args.data, "data")
    bundles = _read_bundles(data)
    g = run.grid
    variants = args.variants.split(",") if args.variants else list(g.variants)
    ratios = [float(x) for x in args.ratios.split(",")] if args.ratios else list(g.ratios)
    ks = [int(x) for x in args.ks.split(",")] if args.ks else list(g.k_values)
    seeds = [int(x) for x in args.seeds.split(",")] if args.seeds else list(g.seeds)
    if args.seed is not None:
        seeds = [args.seed]
    base = _train_config(run, argparse.Namespace(epochs=args.epochs), bundles)
    for v in variants:
        base.replace(variant=v)  # reject unknown variants before any training
    out = Path(args.out)
    grid_doc = {"variants": variants, "ratios": ratios, "k_values": ks, "seeds": seeds}
    write_manifest(out, "ablate", args.argv, {"train": to_dict(base), "grid": grid_doc}, None)

    def progress(cell, row):
        acc = f"{row['accuracy']:.4f}" if row else "FAILED"
        print(f"{cell.key} accuracy={acc}", flush=True)

    result = run_grid(bundles, variants, ratios, ks, seeds, base, out_dir=out,
                      dump_features=args.dump_features, progress=progress)
    for v in variants:
        try:
            print(f"{v}: mean accuracy {result.mean_accuracy(v):.4f}")
        except KeyError:
            print(f"{v}: no successful cells")
    return EXIT_RUNTIME if result.failures else EXIT_OK


def cmd_interpret(args, run: RunConfig) -> int:
    ck = _need_file(args.checkpoint, "checkpoint")
    data = _need_file(args.data, "data")
    img_dir = _need_dir(args.images, "images") if args.images else None
    truth = _load_truth(_need_file(args.groundtruth, "groundtruth")) if args.groundtruth else None
    model = TrainedModel.load(ck)
    cfg = model.config
    subset = _split_of(_read_bundles(data), args.split, cfg.split_ratio, cfg.seed)
    records = interpret_many(model, subset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "interpretations.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    if img_dir is not None:
        export_overlays(records, img_dir, out / "overlays")
    write_manifest(out, "interpret", args.argv, {"train": to_dict(cfg), "split": args.split}, cfg.seed)
    if truth is not None:
        s = localization(records, subset, truth)
        print(f"top-1 concept IoU>0.3 on {s.hits}/{s.correct} correct images ({s.hit_rate:.3f}); "
              f"padded slots selected {s.padded_selected}")
    print(f"wrote {len(records)} interpretation records to {out}")
    return EXIT_OK


def cmd_gradcheck(args, run: RunConfig) -> int:
    reports = run_suite(args.tolerance)
    for r in reports:
        for line in r.lines():
            print(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        doc = {r.selector: {"max_error": r.max_error, "ok": r.ok, "errors": r.errors} for r in reports}
        (out / "gradcheck.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        write_manifest(out, "gradcheck", args.argv, {"tolerance": args.tolerance}, None)
    failed = [r.selector for r in reports if not r.ok]
    if failed:
        print(f"gradient check FAILED for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    print("all gradient checks passed")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("-q", "--quiet", action="store_true", help="only print results")

    p = argparse.ArgumentParser(prog="cafusion", description="Concept/global fusion classifier pipeline.")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    sub.add_parser("synth", parents=[common], help="render a synthetic dataset and its concept bundles")

    s = sub.add_parser("extract", parents=[common], help="extract concept bundles from a directory of PNGs")
    s.add_argument("--images", help="directory of PNG images (p<patient>_i<image>.png)")
    s.add_argument("--groundtruth", help="groundtruth.json supplying labels")

    s = sub.add_parser("train", parents=[common], help="train one model")
    s.add_argument("--data", help="bundle file (.cafb)")
    s.add_argument("--ratio", type=float, help="train/total patient ratio")
    s.add_argument("--k", type=int, help="top-k pooling size")
    s.add_argument("--variant", help="fusion variant")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float, help="learning rate")
    s.add_argument("--n-concepts", dest="n_concepts", type=int, help="concept slots per image")
    s.add_argument("--resume", help="checkpoint to continue from")

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("--checkpoint", help="checkpoint.cafc")
    s.add_argument("--data", help="bundle file (.cafb)")
    s.add_argument("--split", choices=("val", "train", "all"), default="val")
    s.add_argument("--average", choices=("macro", "weighted"), default="macro")
    s.add_argument("--last", action="store_true", help="use the final weights instead of the best epoch")

    s = sub.add_parser("ablate", parents=[common], help="train/evaluate a variant x ratio x k x seed grid")
    s.add_argument("--data", help="bundle file (.cafb)")
    s.add_argument("--variants", help="comma-separated fusion variants")
    s.add_argument("--ratios", help="comma-separated train ratios")
    s.add_argument("--ks", help="comma-separated top-k values")
    s.add_argument("--seeds", help="comma-separated seeds")
    s.add_argument("--epochs", type=int)
    s.add_argument("--dump-features", action="store_true", help="save fused features per cell (.npz)")

    s = sub.add_parser("interpret", parents=[common], help="explain predictions by their top concept")
    s.add_argument("--checkpoint", help="checkpoint.cafc")
    s.add_argument("--data", help="bundle file (.cafb)")
    s.add_argument("--images", help="image directory for overlay PNGs")
    s.add_argument("--groundtruth", help="groundtruth.json for a localisation score")
    s.add_argument("--split", choices=("val", "train", "all"), default="val")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.set_defaults(out=None)
    return p


COMMANDS = {
    "synth": cmd_synth, "extract": cmd_extract, "train": cmd_train, "eval": cmd_eval,
    "ablate": cmd_ablate, "interpret": cmd_interpret, "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the synopsis
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    args.argv = argv
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        run = RunConfig.load(args.config)
        return COMMANDS[args.command](args, run)
    except (UsageError, ConfigError, BundleFormatError, checkpoint.CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # anything else happened mid-run
        log.debug("run failed", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
