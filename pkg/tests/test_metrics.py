import numpy as np
import pytest

from cafusion.metrics import compute_metrics, confusion_matrix
from oracles import metrics_counting


def test_perfect_classifier():
    r = compute_metrics([0, 1, 2, 2], [0, 1, 2, 2], 3)
    assert r.summary() == {"precision": 1.0, "recall": 1.0, "f1": 1.0, "accuracy": 1.0}


def test_worked_two_class_example():
    # confusion [[2, 0], [1, 1]]
    r = compute_metrics([0, 0, 1, 1], [0, 0, 0, 1], 2)
    np.testing.assert_array_equal(r.confusion, [[2, 0], [1, 1]])
    assert r.accuracy == pytest.approx(0.75, abs=1e-12)
    assert r.macro_precision == pytest.approx(5 / 6, abs=1e-12)
    assert r.macro_recall == pytest.approx(0.75, abs=1e-12)
    assert r.macro_f1 == pytest.approx(11 / 15, abs=1e-12)
    assert round(r.macro_precision, 5) == 0.83333 and round(r.macro_f1, 5) == 0.73333


def test_single_class_predictions():
    r = compute_metrics([0, 0, 1, 1], [0, 0, 0, 0], 2)
    assert r.accuracy == 0.5
    assert r.macro_f1 == pytest.approx(1 / 3, abs=1e-12)
    assert r.precision[1] == 0.0  # 0/0 defined as 0


def test_macro_f1_is_mean_of_class_f1():
    r = compute_metrics([0, 0, 0, 1, 2, 2], [0, 1, 1, 1, 2, 0], 3)
    assert r.macro_f1 == pytest.approx(r.f1.mean())
    f1_of_means = 2 * r.macro_precision * r.macro_recall / (r.macro_precision + r.macro_recall)
    assert r.macro_f1 != pytest.approx(f1_of_means)


def test_against_counting_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        C = int(rng.integers(2, 6))
        t = rng.integers(0, C, 40)
        p = np.where(rng.random(40) < 0.5, t, rng.integers(0, C, 40))
        r = compute_metrics(t, p, C)
        ref = metrics_counting(list(t), list(p), C)
        for key in ("precision", "recall", "f1", "accuracy"):
            assert r.summary()[key] == pytest.approx(ref[key], abs=1e-12)
        assert r.confusion.sum() == r.count == 40
        np.testing.assert_array_equal(r.confusion.sum(axis=1), np.bincount(t, minlength=C))


def test_weighted_average():
    r = compute_metrics([0, 0, 0, 1], [0, 0, 1, 1], 2, average="weighted")
    w = np.array([0.75, 0.25])
    assert r.macro_recall == pytest.approx(float(w @ r.recall))


def test_errors():
    with pytest.raises(ValueError):
        compute_metrics([], [], 2)
    with pytest.raises(ValueError):
        compute_metrics([0, 1], [0], 2)
    with pytest.raises(ValueError):
        compute_metrics([0], [0], 2, average="micro")


def test_confusion_rows_are_truth():
    assert confusion_matrix([1, 1, 0], [0, 1, 0], 2).tolist() == [[1, 0], [1, 1]]
