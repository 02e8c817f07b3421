"""Acceptance criteria, one test each.

Every test appends a ``PASS``/``FAIL`` line to ``RESULTS``; the terminal
summary hook in conftest prints them after the run.  The benchmark criteria
(6-8) share one session fixture that builds the synthetic benchmark and
trains the full variant grid once.
"""

import json
import time

import numpy as np
import pytest

from cafusion import benchmark, checkpoint, cli, fusion, mil_head, model
from cafusion.config import ModelConfig, TrainConfig
from cafusion.data import bundle_io, make_batch, read_bundle_file, split_by_patient
from cafusion.evaluation import interpret_many, localization, run_grid
from cafusion.gradcheck import run_suite
from cafusion.training import train
from conftest import random_classifier_params, random_fusion_params
from oracles import classify_loop, fuse_loop, topk_sorted

RESULTS: list[str] = []

ABLATIONS = ("concat1", "concat2", "avg_sum", "local_only", "global_only")


def report(number, name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {number}. {name}: {detail}"
    RESULTS.append(line)
    print(line)
    return ok


def test_1_gradient_suite():
    start = time.perf_counter()
    reports = run_suite(tolerance=1e-4)
    elapsed = time.perf_counter() - start
    worst = max(reports, key=lambda r: r.max_error)
    tensors = sum(len(r.errors) for r in reports)
    ok = all(r.ok for r in reports) and elapsed < 60.0
    report(1, "gradient suite", ok,
           f"{tensors} tensors over {len(reports)} checks, worst {worst.max_error:.2e} ({worst.selector}), "
           f"{elapsed:.1f}s")
    assert ok


def test_2_oracle_equivalence():
    rng = np.random.default_rng(2024)
    worst_fuse = worst_cls = 0.0
    topk_exact = True
    instances = 120
    for _ in range(instances):
        H = int(rng.choice([1, 2, 4]))
        D = H * int(rng.integers(1, 4))
        N, n, C = int(rng.integers(1, 4)), int(rng.integers(1, 7)), int(rng.integers(2, 5))
        z_l, z_g = rng.standard_normal((N, n, D)), rng.standard_normal((N, 1, D))
        p = random_fusion_params(D, rng)
        cfg = ModelConfig(d_model=D, heads=H, fusion_dropout=0.0)
        out, att, _ = fusion.fuse(z_l, z_g, p, cfg)
        ref, w = fuse_loop(z_l, z_g, p, H)
        worst_fuse = max(worst_fuse, float(np.abs(out - ref).max()), float(np.abs(att["weights"] - w).max()))

        cp = random_classifier_params(D, C, rng)
        cam, _ = mil_head.classify(out, cp)
        worst_cls = max(worst_cls, float(np.abs(cam - classify_loop(out, cp)).max()))

        k = int(rng.integers(1, n + 1))
        ties = np.round(cam * 2) / 2 if rng.random() < 0.5 else cam  # half the cases carry ties
        pred, idx = mil_head.topk_pool(ties, k)
        ref_pred, ref_idx = topk_sorted(ties, k)
        topk_exact &= bool(np.array_equal(idx, ref_idx)) and float(np.abs(pred - ref_pred).max()) <= 1e-12
    ok = worst_fuse <= 1e-12 and worst_cls <= 1e-12 and topk_exact
    report(2, "oracle equivalence", ok,
           f"{instances} instances; fuse max |diff| {worst_fuse:.1e}, classify {worst_cls:.1e}, "
           f"top-k indices identical: {topk_exact}")
    assert ok


def test_3_attention_invariants(tiny_bundles):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        D, n = 8, int(rng.integers(1, 31))
        scale = float(rng.choice([0.1, 1.0, 10.0]))
        p = random_fusion_params(D, rng, scale=scale)
        _, att, _ = fusion.fuse(rng.standard_normal((2, n, D)), rng.standard_normal((2, 1, D)), p,
                                ModelConfig(d_model=D, heads=2))
        w = att["weights"]
        worst = max(worst, float(np.abs(w.sum(axis=2) - 1.0).max()))
        assert (w >= 0).all()

    cfg = ModelConfig(d_in=256, d_model=32, heads=4, n_concepts=8, k=3, num_classes=3)
    params = {k: (v * 25 if v.ndim == 2 else v).astype(np.float64) for k, v in model.init_params(cfg, 7).items()}
    batch = make_batch(tiny_bundles, cfg.n_concepts, seed=0)
    z_g, z_l = batch.z_g_in.astype(np.float64), batch.z_l_in.astype(np.float64)
    base, _ = model.forward(params, z_g, z_l, batch.valid, cfg)
    pred0 = mil_head.predict(base.o_pred)
    flips, drift = 0, 0.0
    for _ in range(100):
        perm = rng.permutation(cfg.n_concepts)
        out, _ = model.forward(params, z_g, z_l[:, perm], batch.valid[:, perm], cfg)
        flips += int((mil_head.predict(out.o_pred) != pred0).sum())
        drift = max(drift, float(np.abs(out.o_pred - base.o_pred).max()))
    ok = worst <= 1e-6 and flips == 0
    report(3, "attention invariants", ok,
           f"max |sum(w)-1| {worst:.1e} over 200 maps; 100 permutations x {len(batch)} images: "
           f"{flips} prediction changes, max logit drift {drift:.1e}")
    assert ok


def test_4_topk_identities():
    rng = np.random.default_rng(4)
    ok = True
    for _ in range(100):
        n, C = int(rng.integers(1, 31)), int(rng.integers(2, 6))
        # multiples of 1/64 in [-4, 4]: every partial sum is exact, so the mean does not depend on order
        cam = rng.integers(-256, 257, size=(3, n, C)) / 64.0
        ok &= bool(np.array_equal(mil_head.topk_pool(cam, n)[0], cam.mean(axis=1)))
        ok &= bool(np.array_equal(mil_head.topk_pool(cam, 1)[0], cam.max(axis=1)))
        real = rng.standard_normal((3, n, C))
        ok &= bool(np.array_equal(mil_head.topk_pool(real, 1)[0], real.max(axis=1)))
    report(4, "top-k identities", ok, "k=n equals the per-class mean and k=1 the per-class max, bit for bit, "
           "on 100 tensors")
    assert ok


def test_5_overfit_sanity(tiny_bundles):
    by_class = {}
    for b in tiny_bundles:
        by_class.setdefault(b.label, []).append(b)
    toy = by_class[0][:3] + by_class[1][:3] + by_class[2][:2]
    config = TrainConfig(epochs=200, model=ModelConfig(num_classes=3))  # full-size defaults otherwise
    res = train(toy, None, config)
    accs = [r["train_accuracy"] for r in res.log]
    first = next((i + 1 for i, a in enumerate(accs) if a == 1.0), None)
    ok = len(toy) == 8 and first is not None
    report(5, "overfit sanity", ok, f"8 images, train accuracy 1.0 first at epoch {first}, final {accs[-1]:.3f}")
    assert ok


# ----------------------------------------------------------------- benchmark


@pytest.fixture(scope="session")
def bench():
    start = time.perf_counter()
    samples, bundles = benchmark.build()
    variants = ("ours",) + ABLATIONS
    base = benchmark.train_config()
    grid = run_grid(bundles, variants, [benchmark.RATIO], [base.model.k], benchmark.SEEDS, base)
    elapsed = time.perf_counter() - start
    means = {v: grid.mean_accuracy(v) for v in variants}
    return {"samples": samples, "bundles": bundles, "grid": grid, "means": means, "seconds": elapsed,
            "base": base}


def _means_text(means):
    return ", ".join(f"{v} {a:.3f}" for v, a in means.items())


@pytest.mark.slow
def test_6_benchmark_trend(bench):
    means = bench["means"]
    gap = means["ours"] - means["global_only"]
    ok = gap >= 0.05 and bench["seconds"] < 15 * 60 and not bench["grid"].failures
    report(6, "synthetic trend vs global-only", ok,
           f"ours {means['ours']:.3f} vs global_only {means['global_only']:.3f} "
           f"(gap {100 * gap:+.1f} points, need >= +5.0); {len(bench['bundles'])} images, "
           f"{len(benchmark.SEEDS)} seeds, {bench['seconds']:.0f}s")
    assert ok


@pytest.mark.slow
def test_7_ablation_trend(bench):
    means = bench["means"]
    best_other = max(ABLATIONS, key=means.get)
    ok = all(means["ours"] > means[v] for v in ABLATIONS)
    report(7, "ablation trend", ok, f"{_means_text(means)}; best alternative {best_other}")
    assert ok


@pytest.mark.slow
def test_8_interpretation_quality(bench):
    seed = benchmark.SEEDS[0]
    config = bench["base"].replace(seed=seed)
    tr, va = split_by_patient(bench["bundles"], config.split_ratio, seed)
    trained = train(tr, va, config).model()
    records = interpret_many(trained, va)
    truth = {s.truth.image_id: s.lesion_bbox for s in bench["samples"]}
    summary = localization(records, va, truth)
    ok = summary.hit_rate >= 0.70 and summary.padded_selected == 0
    report(8, "interpretation quality", ok,
           f"top-1 concept IoU>0.3 on {summary.hits}/{summary.correct} correctly classified images "
           f"({100 * summary.hit_rate:.1f}%, need >= 70%); padded slots selected {summary.padded_selected}")
    assert ok


# ----------------------------------------------------------- reproducibility


def test_9_reproducibility(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({
        "synth": {"num_classes": 3, "patients_per_class": 4, "images_per_patient_range": [1, 2], "seed": 9},
        "train": {"epochs": 3, "batch_size_train": 8, "batch_size_eval": 16,
                  "model": {"d_model": 32, "heads": 4, "n_concepts": 8, "k": 2, "num_classes": 3}},
        "grid": {"variants": ["ours", "concat2"], "ratios": [0.5], "k_values": [2], "seeds": [0, 1]},
    }))
    for tag in ("a", "b"):
        out = tmp_path / tag
        assert cli.main(["synth", "--config", str(cfg), "--out", str(out / "data"), "-q"]) == 0
        data = str(out / "data" / "bundles.cafb")
        assert cli.main(["train", "--config", str(cfg), "--data", data, "--out", str(out / "run"), "-q"]) == 0
        assert cli.main(["ablate", "--config", str(cfg), "--data", data, "--out", str(out / "grid"), "-q"]) == 0
    files = ["data/bundles.cafb", "data/groundtruth.json", "run/train_log.jsonl", "run/checkpoint.cafc",
             "grid/results.csv", "grid/confusion.json"]
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files}

    path = tmp_path / "a" / "data" / "bundles.cafb"
    raw = path.read_bytes()
    back = read_bundle_file(path)
    reencoded = bundle_io.encode_bundles(back) == raw
    state = checkpoint.load(tmp_path / "a" / "run" / "checkpoint.cafc")
    ck_round = checkpoint.dumps(state) == (tmp_path / "a" / "run" / "checkpoint.cafc").read_bytes()

    ok = all(same.values()) and reencoded and ck_round
    differing = [f for f, s in same.items() if not s]
    report(9, "reproducibility", ok,
           f"{len(files) - len(differing)}/{len(files)} artefacts byte-identical across two runs"
           + (f" (differ: {', '.join(differing)})" if differing else "")
           + f"; bundle re-encode bit-exact: {reencoded}; checkpoint re-encode bit-exact: {ck_round}")
    assert ok
