import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from usmae.evaluation import evaluate, evaluate_arrays
from usmae.metrics import (
    PredictionSet,
    build_report,
    confusion_matrix,
    pr_curve_ovr,
    roc_curve_ovr,
    weighted_metrics,
    write_report,
)
from usmae.data_pipeline import DatasetManifest, ImageRecord, ManifestRecord, PreprocessConfig, save_image
from usmae.vit_mae import ModelConfig, init_parameters

CLASSES = ("Aorta", "Flows", "Other", "VSign", "XSign")


def random_predictions(rng, n, k=5):
    labels = rng.integers(0, k, n)
    scores = rng.dirichlet(np.ones(k), size=n)
    return PredictionSet(labels, scores)


# -------------------------------------------------------- confusion matrix


def test_all_correct_is_diagonal():
    labels = np.array([0, 1, 2, 3, 4, 4, 2])
    cm = confusion_matrix(labels, labels)
    assert (cm == np.diag(np.diag(cm))).all() and cm.trace() == 7


def test_single_sample():
    cm = confusion_matrix([0], [2])
    assert cm[0, 2] == 1 and cm.sum() == 1


@pytest.mark.parametrize("seed", range(10))
def test_confusion_matches_recount(seed):
    rng = np.random.default_rng(seed)
    labels, preds = rng.integers(0, 5, 50), rng.integers(0, 5, 50)
    cm = confusion_matrix(labels, preds)
    for i in range(5):
        for j in range(5):
            assert cm[i, j] == sum(1 for a, b in zip(labels, preds) if a == i and b == j)
    assert cm.sum(axis=1).tolist() == [int((labels == c).sum()) for c in range(5)]


def test_confusion_rejects_unknown_label():
    with pytest.raises(ValueError):
        confusion_matrix([0, 5], [0, 1])
    with pytest.raises(ValueError):
        confusion_matrix([], [])


def test_prediction_set_tie_break_lowest_index():
    ps = PredictionSet([0, 1], [[0.4, 0.4, 0.2], [0.1, 0.45, 0.45]])
    assert ps.predicted.tolist() == [0, 1]


# ---------------------------------------------------------- averaged scores


def test_perfect_predictions():
    labels = np.array([0, 1, 2, 3, 4, 0])
    assert weighted_metrics(labels, labels) == (1.0, 1.0, 1.0, 1.0)


def test_collapsed_toy_case():
    acc, prec, rec, f1 = weighted_metrics([0, 0, 0, 1], [0, 0, 0, 0], num_classes=2)
    assert acc == 0.75 and rec == 0.75
    assert prec == pytest.approx(0.5625, abs=1e-12)
    assert f1 == pytest.approx(0.75 * 2 * 0.75 * 1 / 1.75, abs=1e-12)
    assert f1 == pytest.approx(0.6429, abs=1e-4)


def test_macro_average():
    acc, prec, rec, f1 = weighted_metrics([0, 0, 0, 1], [0, 0, 0, 0], num_classes=2, average="macro")
    assert (prec, rec) == (0.375, 0.5)


def test_weighted_recall_equals_accuracy_exactly():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        ps = random_predictions(rng, int(rng.integers(1, 40)))
        acc, _, rec, _ = weighted_metrics(ps)
        assert rec == acc


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=60), st.randoms(use_true_random=False))
def test_metrics_invariant_to_reordering(pairs, rnd):
    labels, preds = map(np.array, zip(*pairs))
    order = list(range(len(pairs)))
    rnd.shuffle(order)
    assert weighted_metrics(labels, preds) == weighted_metrics(labels[order], preds[order])


# ---------------------------------------------------------------------- ROC


def _rank_auc(labels, scores, c):
    pos = [s for y, s in zip(labels, scores) if y == c]
    neg = [s for y, s in zip(labels, scores) if y != c]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def test_roc_perfect_and_ties():
    labels = np.array([0, 0, 1, 1])
    assert roc_curve_ovr(labels, np.array([0.9, 0.8, 0.1, 0.2]), 0).area == 1.0
    assert roc_curve_ovr(labels, np.full(4, 0.3), 0).area == 0.5


def test_roc_curve_shape():
    curve = roc_curve_ovr(np.array([0, 1, 0]), np.array([0.2, 0.5, 0.9]), 0)
    assert curve.thresholds[0] == np.inf
    assert (curve.x[0], curve.y[0]) == (0.0, 0.0) and (curve.x[-1], curve.y[-1]) == (1.0, 1.0)
    assert list(curve.thresholds[1:]) == [0.9, 0.5, 0.2]


@pytest.mark.parametrize("seed", range(30))
def test_roc_auc_matches_rank_statistic(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, 20)
    labels[:2] = [0, 1]
    scores = np.round(rng.random(20), 1)  # coarse rounding forces ties
    assert abs(roc_curve_ovr(labels, scores, 0).area - _rank_auc(labels, scores, 0)) < 1e-9


def test_roc_on_prediction_set():
    ps = random_predictions(np.random.default_rng(4), 40)
    for c in range(5):
        assert abs(roc_curve_ovr(ps, c).area - _rank_auc(ps.labels, ps.scores[:, c], c)) < 1e-9


def test_roc_monotone_transform_invariance():
    rng = np.random.default_rng(5)
    labels, scores = rng.integers(0, 2, 30), rng.random(30)
    labels[:2] = [0, 1]
    a = roc_curve_ovr(labels, scores, 1).area
    b = roc_curve_ovr(labels, np.exp(3 * scores) - 7, 1).area
    assert a == b


def test_roc_undefined_for_single_class():
    with pytest.raises(ValueError, match="undefined ROC"):
        roc_curve_ovr(np.zeros(4, int), np.random.default_rng(0).random(4), 0)


# ----------------------------------------------------------------------- PR


def _sweep_ap(labels, scores, c):
    positives = sum(1 for y in labels if y == c)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        called = [y for y, s in zip(labels, scores) if s >= t]
        tp = sum(1 for y in called if y == c)
        recall = tp / positives
        ap += (recall - prev_recall) * (tp / len(called))
        prev_recall = recall
    return ap


def test_pr_perfect_ranking():
    assert pr_curve_ovr(np.array([1, 1, 0, 0]), np.array([0.9, 0.8, 0.3, 0.1]), 1).area == 1.0


@pytest.mark.parametrize("n", [2, 5, 17])
def test_pr_worst_case(n):
    labels = np.zeros(n, int)
    labels[0] = 1
    scores = np.ones(n)
    scores[0] = 0.0
    assert pr_curve_ovr(labels, scores, 1).area == pytest.approx(1 / n, abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_pr_matches_threshold_sweep(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, 25)
    labels[0] = 2
    scores = np.round(rng.random(25), 2)
    assert abs(pr_curve_ovr(labels, scores, 2).area - _sweep_ap(labels, scores.tolist(), 2)) < 1e-9


def test_pr_needs_a_positive():
    with pytest.raises(ValueError):
        pr_curve_ovr(np.zeros(3, int), np.ones(3), 1)


# ------------------------------------------------------------------ reports


def test_report_files(tmp_path):
    ps = random_predictions(np.random.default_rng(6), 30)
    report = build_report(ps, CLASSES)
    assert report.confusion.sum() == 30 and report.recall == report.accuracy
    assert all(0.0 <= c.area <= 1.0 for c in list(report.roc.values()) + list(report.pr.values()))
    written = write_report(report, tmp_path)
    names = {p.name for p in written}
    assert {"metrics.csv", "confusion.csv"} <= names
    assert {f"roc_{c}.csv" for c in CLASSES} <= names and {f"pr_{c}.csv" for c in CLASSES} <= names
    with (tmp_path / "confusion.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0][1:] == list(CLASSES)
    assert np.array([[int(v) for v in r[1:]] for r in rows[1:]]).tolist() == report.confusion.tolist()
    with (tmp_path / "roc_Aorta.csv").open() as fh:
        assert next(csv.reader(fh)) == ["threshold", "x", "y"]


def test_report_skips_curves_for_absent_class():
    ps = PredictionSet([0, 1, 1], np.full((3, 5), 0.2))
    report = build_report(ps, CLASSES)
    assert set(report.roc) == {"Aorta", "Flows"} and set(report.pr) == {"Aorta", "Flows"}


# --------------------------------------------------------------- evaluation


@pytest.fixture
def tiny_classifier():
    cfg = ModelConfig(image_size=16, patch_size=8, encoder_dim=8, encoder_depth=1, encoder_heads=2)
    return init_parameters(cfg, np.random.default_rng(0)).without_decoder()


def test_constant_logits_give_majority_prior(tiny_classifier):
    for name, p in tiny_classifier.params.items():
        if name.startswith("head.fc2"):
            p.data[...] = 0.0
    tiny_classifier.params["head.fc2.bias"].data[:] = [0, 0, 0, 1, 0]
    labels = np.array([3, 3, 3, 0, 1, 2, 3, 4])
    images = np.random.default_rng(1).standard_normal((8, 3, 16, 16)).astype(np.float32)
    report = evaluate_arrays(tiny_classifier, images, labels, CLASSES)
    assert report.accuracy == 4 / 8


def test_evaluation_is_deterministic_and_order_free(tiny_classifier):
    rng = np.random.default_rng(2)
    images = rng.standard_normal((10, 3, 16, 16)).astype(np.float32)
    labels = rng.integers(0, 5, 10)
    a = evaluate_arrays(tiny_classifier, images, labels, CLASSES)
    b = evaluate_arrays(tiny_classifier, images, labels, CLASSES)
    assert a.summary() == b.summary() and (a.confusion == b.confusion).all()
    order = rng.permutation(10)
    c = evaluate_arrays(tiny_classifier, images[order], labels[order], CLASSES)
    assert (c.confusion == a.confusion).all()
    assert c.accuracy == a.accuracy and c.f1 == pytest.approx(a.f1, abs=1e-12)
    for name in a.roc:
        assert c.roc[name].area == pytest.approx(a.roc[name].area, abs=1e-12)


def test_evaluate_manifest_split(tmp_path, tiny_classifier):
    for i in range(3):
        save_image(tmp_path / f"{i}.pgm", ImageRecord(np.full((20, 16), 40 * i, np.uint8)))
    records = [ManifestRecord(f"{i}.pgm", CLASSES[i], f"p{i}", "test") for i in range(3)]
    manifest = DatasetManifest(records, CLASSES, tmp_path)
    report = evaluate(tiny_classifier, manifest, PreprocessConfig(crop_top=4, target_size=16))
    assert report.confusion.sum() == 3
    with pytest.raises(ValueError, match="no images"):
        evaluate(tiny_classifier, manifest, PreprocessConfig(crop_top=4, target_size=16), split="val")
