import json

import numpy as np
import pytest
from PIL import Image

from cafusion.data import ConceptBundle, split_by_patient
from cafusion.evaluation import (
    CSV_FIELDS, InterpretationRecord, LocalizationSummary, evaluate, export_overlays, image_name, interpret,
    interpret_many, localization, run_grid,
)
from cafusion.training import train
from conftest import tiny_train_config


@pytest.fixture(scope="module")
def trained(tiny_bundles):
    tr, va = split_by_patient(tiny_bundles, 0.5, 0)
    return train(tr, va, tiny_train_config(epochs=4)).model(), va


def test_grid_two_variants_two_rows(tiny_bundles, tmp_path):
    res = run_grid(tiny_bundles, ["ours", "global_only"], [0.5], [2], [0], tiny_train_config(epochs=1),
                   out_dir=tmp_path)
    assert len(res.rows) == 2 and not res.failures
    lines = (tmp_path / "results.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_FIELDS)
    assert len(lines) == 3 and lines[1].startswith("ours,0.5,2,0,")
    conf = json.loads((tmp_path / "confusion.json").read_text())
    assert set(conf) == {"ours|0.5|2|0", "global_only|0.5|2|0"}
    assert np.array(conf["ours|0.5|2|0"]).shape == (3, 3)
    assert len(json.loads((tmp_path / "class_accuracy.json").read_text())["ours|0.5|2|0"]) == 3


def test_k_sweep_rows(tiny_bundles):
    base = tiny_train_config(epochs=1, n_concepts=15)
    res = run_grid(tiny_bundles, ["ours"], [0.5], [1, 2, 5, 6, 15], [0], base)
    assert [r["k"] for r in res.rows] == [1, 2, 5, 6, 15]


def test_failed_cell_recorded_and_grid_continues(tiny_bundles):
    res = run_grid(tiny_bundles, ["ours", "bogus"], [0.5], [2], [0], tiny_train_config(epochs=1))
    assert [r["variant"] for r in res.rows] == ["ours"]
    assert res.failures[0]["cell"] == "bogus|0.5|2|0"


def test_empty_lists_rejected(tiny_bundles):
    with pytest.raises(ValueError):
        run_grid(tiny_bundles, [], [0.5], [2], [0], tiny_train_config())


def test_mean_accuracy_filters(tiny_bundles):
    res = run_grid(tiny_bundles, ["avg_sum"], [0.5], [2], [0, 1], tiny_train_config(epochs=1))
    accs = [r["accuracy"] for r in res.rows]
    assert res.mean_accuracy("avg_sum") == pytest.approx(np.mean(accs))
    assert res.mean_accuracy("avg_sum", seed=1) == accs[1]
    with pytest.raises(KeyError):
        res.mean_accuracy("ours")


def test_evaluate_report(trained):
    model, va = trained
    rep = evaluate(model, va)
    assert rep.count == len(va) and 0.0 <= rep.accuracy <= 1.0


def test_interpretation_picks_best_valid_slot(trained):
    model, va = trained
    records = interpret_many(model, va)
    out = model.forward(model.batch(va))
    for rec, b, cam in zip(records, va, out.o_cam):
        if b.n_real == 0:
            assert rec.status == "no-concept"
            continue
        n_slots = min(b.n_real, model.config.model.n_concepts)
        assert 0 <= rec.top1_index < n_slots
        scores = cam[:n_slots, rec.predicted]
        assert rec.top1_index == int(np.argmax(scores))
        assert rec.column_scores == pytest.approx(list(scores), abs=1e-6)
        assert sum(rec.row_scores) == pytest.approx(1.0, abs=1e-6)
        assert rec.predicted == int(np.argmax(rec.row_scores))


def test_no_concept_fallback(trained):
    model, va = trained
    empty = ConceptBundle(99, 999, 0, va[0].global_source, [], va[0].grid)
    rec = interpret(model, empty)
    assert rec.status == "no-concept" and rec.top1_index is None and rec.bbox is None
    assert len(rec.row_scores) == 3


def test_variants_without_concept_scores_refused(tiny_bundles):
    tr, va = split_by_patient(tiny_bundles, 0.5, 0)
    m = train(tr, va, tiny_train_config(epochs=1, variant="global_only")).model()
    with pytest.raises(ValueError):
        interpret_many(m, va)


def _write_images(samples, folder):
    folder.mkdir()
    for s in samples:
        t = s.truth
        Image.fromarray(np.round(s.image * 255).astype(np.uint8)).save(folder / image_name(t.patient_id, t.image_id))


def test_overlays_counts_and_determinism(trained, tiny_samples, tmp_path):
    model, va = trained
    _write_images(tiny_samples, tmp_path / "img")
    recs = [r for r in interpret_many(model, va) if r.status == "ok"][:3]
    written = export_overlays(recs, tmp_path / "img", tmp_path / "a")
    assert len(list((tmp_path / "a").glob("*.json"))) == 3
    assert len(list((tmp_path / "a").glob("*.png"))) == 3
    assert len(written) == 6
    side = json.loads((tmp_path / "a" / f"p{recs[0].patient_id}_i{recs[0].image_id}.json").read_text())
    assert tuple(side["bbox"]) == recs[0].bbox
    export_overlays(recs, tmp_path / "img", tmp_path / "b")
    for p in (tmp_path / "a").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_overlay_missing_image(trained, tmp_path):
    model, va = trained
    recs = interpret_many(model, va[:1])
    with pytest.raises(FileNotFoundError):
        export_overlays(recs, tmp_path, tmp_path / "out")


def test_localization_counting():
    bundles = [ConceptBundle(0, i, 1, np.zeros(1), [None] * 2) for i in range(4)]
    rec = lambda i, pred, box: InterpretationRecord(0, i, pred, [0.5, 0.5], [1.0, 0.0], 0, box, [])  # noqa: E731
    records = [rec(0, 1, (0, 0, 10, 10)), rec(1, 1, (50, 50, 60, 60)), rec(2, 0, (0, 0, 10, 10)),
               rec(3, 1, (0, 0, 12, 12))]
    truth = {i: (0, 0, 10, 10) for i in range(4)}
    s = localization(records, bundles, truth)
    assert (s.correct, s.hits, s.padded_selected) == (3, 2, 0)
    assert s.hit_rate == pytest.approx(2 / 3)
    assert LocalizationSummary(0, 0, 0).hit_rate == 0.0
