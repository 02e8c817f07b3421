"""Grid evaluation, concept-level interpretation and overlay export."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .config import TrainConfig
from .data import rle
from .data.bundles import slot_concepts, split_by_patient
from .data.types import ConceptBundle, bbox_iou
from .metrics import MetricsReport, compute_metrics
from .nn import softmax
from .training import TrainedModel, train

log = logging.getLogger(__name__)

CSV_FIELDS = ("variant", "ratio", "k", "seed", "precision", "recall", "f1", "accuracy")
CONCEPT_VARIANTS = ("ours", "local_only", "concat1", "concat2")


def evaluate(model: TrainedModel, bundles: Sequence[ConceptBundle], average: str = "macro") -> MetricsReport:
    pred = model.predict(bundles)
    return compute_metrics([b.label for b in bundles], pred, model.config.model.num_classes, average)


# ---------------------------------------------------------------- grid runner


@dataclass(frozen=True)
class Cell:
    variant: str
    ratio: float
    k: int
    seed: int

    @property
    def key(self) -> str:
        return f"{self.variant}|{self.ratio:g}|{self.k}|{self.seed}"


@dataclass
class GridResult:
    rows: list[dict] = field(default_factory=list)
    confusion: dict[str, list[list[int]]] = field(default_factory=dict)
    class_accuracy: dict[str, list[float]] = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)

    def mean_accuracy(self, variant: str, **where) -> float:
        accs = [r["accuracy"] for r in self.rows if r["variant"] == variant
                and all(r[k] == v for k, v in where.items())]
        if not accs:
            raise KeyError(f"no rows for variant {variant!r} with {where}")
        return float(np.mean(accs))

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) and k != "ratio" else r[k])
                        for k in CSV_FIELDS})
        return buf.getvalue()

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(self.csv_text())
        (out / "confusion.json").write_text(json.dumps(self.confusion, indent=1, sort_keys=True))
        (out / "class_accuracy.json").write_text(json.dumps(self.class_accuracy, indent=1, sort_keys=True))
        (out / "failures.json").write_text(json.dumps(self.failures, indent=1))
        return out


def cells(variants, ratios, k_values, seeds) -> list[Cell]:
    for name, values in (("variants", variants), ("ratios", ratios), ("k_values", k_values), ("seeds", seeds)):
        if not list(values):
            raise ValueError(f"{name} must not be empty")
    return [Cell(v, float(r), int(k), int(s)) for r in ratios for k in k_values for v in variants for s in seeds]


def run_grid(
    bundles: Sequence[ConceptBundle],
    variants: Iterable[str],
    ratios: Iterable[float],
    k_values: Iterable[int],
    seeds: Iterable[int],
    base: TrainConfig,
    out_dir=None,
    dump_features: bool = False,
    progress: Callable[[Cell, dict | None], None] | None = None,
) -> GridResult:
    """Train and evaluate every (variant, ratio, k, seed) cell.

    The split for a cell is drawn with the cell's seed, so every variant sees
    the same patients.  A failing cell is logged in ``failures`` and the grid
    moves on.  With ``out_dir`` the tables are rewritten after every cell.
    """
    result = GridResult()
    out = Path(out_dir) if out_dir is not None else None
    for cell in cells(list(variants), list(ratios), list(k_values), list(seeds)):
        row = None
        try:
            config = base.replace(variant=cell.variant, k=cell.k, seed=cell.seed, split_ratio=cell.ratio)
            tr, va = split_by_patient(bundles, cell.ratio, cell.seed)
            model = train(tr, va, config).model()
            batch = model.batch(va)
            out_v = model.forward(batch)
            pred = out_v.o_pred.argmax(axis=1)
            rep = compute_metrics(batch.labels, pred, config.model.num_classes)
            row = {"variant": cell.variant, "ratio": cell.ratio, "k": cell.k, "seed": cell.seed, **rep.summary()}
            result.rows.append(row)
            result.confusion[cell.key] = rep.confusion.tolist()
            result.class_accuracy[cell.key] = [round(float(a), 6) for a in rep.class_accuracy()]
            if dump_features and out is not None:
                np.savez(out / f"features_{cell.variant}_r{cell.ratio:g}_k{cell.k}_s{cell.seed}.npz",
                         fused=out_v.fused, o_cam=out_v.o_cam, labels=batch.labels,
                         provenance=np.array(batch.provenance))
        except Exception as exc:  # one bad cell must not sink the grid
            log.warning("grid cell %s failed: %s", cell.key, exc)
            result.failures.append({"cell": cell.key, "error": f"{type(exc).__name__}: {exc}"})
        if progress is not None:
            progress(cell, row)
        if out is not None:
            result.write(out)
    return result


# ------------------------------------------------------------- interpretation


@dataclass
class InterpretationRecord:
    patient_id: int
    image_id: int
    predicted: int
    row_scores: list[float]  # softmax of the bag logits
    column_scores: list[float]  # class-predicted CAM score of every real concept, in slot order
    top1_index: int | None
    bbox: tuple[int, int, int, int] | None
    mask_rle: list[int] | None
    status: str = "ok"  # or "no-concept"
    valid_only: bool = True

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id, "image_id": self.image_id, "predicted": self.predicted,
            "row_scores": self.row_scores, "column_scores": self.column_scores,
            "top1_index": self.top1_index, "bbox": list(self.bbox) if self.bbox else None,
            "status": self.status, "valid_only": self.valid_only,
        }


def _interpret_one(bundle: ConceptBundle, o_pred, o_cam, valid, n: int) -> InterpretationRecord:
    c_hat = int(np.argmax(o_pred))
    rows = [round(float(p), 8) for p in softmax(o_pred.astype(np.float64), axis=0)]
    real = np.flatnonzero(valid[:n])
    if real.size == 0:
        return InterpretationRecord(bundle.patient_id, bundle.image_id, c_hat, rows, [], None, None, None,
                                    status="no-concept")
    cols = o_cam[real, c_hat].astype(np.float64)
    top = int(real[int(np.argmax(cols))])  # first maximum on ties
    concept = slot_concepts(bundle, n)[top]
    return InterpretationRecord(
        bundle.patient_id, bundle.image_id, c_hat, rows, [round(float(c), 8) for c in cols], top,
        tuple(int(v) for v in concept.bbox), [int(r) for r in concept.mask_rle],
    )


def interpret(model: TrainedModel, bundle: ConceptBundle) -> InterpretationRecord:
    """Explain one prediction by the real concept that contributes most to the predicted class."""
    return interpret_many(model, [bundle])[0]


def interpret_many(model: TrainedModel, bundles: Sequence[ConceptBundle]) -> list[InterpretationRecord]:
    cfg = model.config.model
    if cfg.variant not in CONCEPT_VARIANTS:
        raise ValueError(f"variant {cfg.variant!r} has no per-concept scores to interpret")
    if not bundles:
        return []
    batch = model.batch(bundles)
    out = model.forward(batch)
    n = cfg.n_concepts
    return [_interpret_one(b, out.o_pred[i], out.o_cam[i], batch.valid[i], n) for i, b in enumerate(bundles)]


@dataclass
class LocalizationSummary:
    correct: int
    hits: int
    padded_selected: int

    @property
    def hit_rate(self) -> float:
        return self.hits / self.correct if self.correct else 0.0


def localization(records: Sequence[InterpretationRecord], bundles: Sequence[ConceptBundle],
                 lesion_boxes: dict[int, tuple], threshold: float = 0.3) -> LocalizationSummary:
    """Share of correctly classified images whose top concept overlaps the true lesion box."""
    correct = hits = padded = 0
    for rec, b in zip(records, bundles):
        if rec.status == "ok" and rec.top1_index >= b.n_real:
            padded += 1
        if rec.predicted != b.label:
            continue
        correct += 1
        if rec.bbox is not None and bbox_iou(rec.bbox, lesion_boxes[b.image_id]) > threshold:
            hits += 1
    return LocalizationSummary(correct, hits, padded)


# -------------------------------------------------------------------- overlays


def image_name(patient_id: int, image_id: int) -> str:
    return f"p{patient_id}_i{image_id}.png"


def export_overlays(records: Sequence[InterpretationRecord], image_dir, out_dir) -> list[Path]:
    """Write ``<stem>.json`` and ``<stem>_overlay.png`` per record; returns the written paths."""
    image_dir, out_dir = Path(image_dir), Path(out_dir)
    sources = [image_dir / image_name(r.patient_id, r.image_id) for r in records]
    missing = [str(p) for p in sources if not p.is_file()]
    if missing:
        raise FileNotFoundError(f"missing source image(s): {', '.join(missing[:5])}")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for rec, src in zip(records, sources):
        stem = src.stem
        side = out_dir / f"{stem}.json"
        side.write_text(json.dumps(rec.to_json(), indent=1, sort_keys=True))
        img = np.asarray(Image.open(src).convert("RGB"), dtype=np.float64)
        if rec.mask_rle is not None:
            mask = rle.decode(np.asarray(rec.mask_rle), img.shape[:2])
            img[mask] = 0.55 * img[mask] + 0.45 * np.array([255.0, 40.0, 40.0])
        canvas = Image.fromarray(np.round(img).astype(np.uint8))
        if rec.bbox is not None:
            x0, y0, x1, y1 = rec.bbox
            ImageDraw.Draw(canvas).rectangle([x0, y0, x1 - 1, y1 - 1], outline=(255, 255, 0))
        png = out_dir / f"{stem}_overlay.png"
        canvas.save(png, format="PNG")
        written += [side, png]
    return written
