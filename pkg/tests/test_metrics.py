import json

import numpy as np
import pytest

from comae.metrics import compute_report
from comae.seeding import stream


def test_two_class_hand_example():
    # class A 3/4 correct, class B 1/2 correct
    labels = [0, 0, 0, 0, 1, 1]
    preds = [0, 0, 0, 1, 1, 0]
    report = compute_report(preds, labels, 2)
    assert abs(report.acc_s - 4 / 6) < 1e-12
    assert abs(report.acc_c - (0.75 + 0.5) / 2) < 1e-12
    assert report.confusion.tolist() == [[3, 1], [1, 1]]


def test_all_correct():
    report = compute_report([0, 1, 2], [0, 1, 2], 3)
    assert report.acc_s == 1.0 and report.acc_c == 1.0


def test_balanced_classes_equal_metrics():
    rng = stream("bal")
    labels = np.repeat(np.arange(4), 25)
    preds = labels.copy()
    flip = rng.choice(100, size=20, replace=False)
    preds[flip] = (preds[flip] + 1) % 4
    # errors spread unevenly does not matter: equal class counts make the
    # weighted and unweighted means coincide only when per-class errors match;
    # force symmetric errors per class instead
    preds = labels.copy()
    for c in range(4):
        idx = np.where(labels == c)[0][:5]
        preds[idx] = (c + 1) % 4
    report = compute_report(preds, labels, 4)
    assert abs(report.acc_s - report.acc_c) < 1e-12


def test_permutation_invariance():
    rng = stream("perm")
    labels = rng.integers(0, 5, 60)
    preds = rng.integers(0, 5, 60)
    a = compute_report(preds, labels, 5)
    order = rng.permutation(60)
    b = compute_report(preds[order], labels[order], 5)
    assert a.acc_s == b.acc_s and a.acc_c == b.acc_c
    assert np.array_equal(a.confusion, b.confusion)


def test_absent_class_excluded_from_acc_c():
    report = compute_report([0, 0, 1], [0, 0, 1], 5)
    assert report.acc_c == 1.0
    assert np.isnan(report.per_class_acc[3])
    payload = json.loads(json.dumps(report.to_dict()))
    assert payload["per_class"][3] is None
    assert payload["acc_s"] == 1.0


def test_confusion_row_sums_match_class_counts():
    rng = stream("rows")
    labels = rng.integers(0, 3, 40)
    preds = rng.integers(0, 3, 40)
    report = compute_report(preds, labels, 3)
    counts = np.bincount(labels, minlength=3)
    assert np.array_equal(report.confusion.sum(axis=1), counts)
    assert 0.0 <= report.acc_c <= 1.0 and 0.0 <= report.acc_s <= 1.0


def test_error_concentration_direction():
    # errors concentrated in a small class: acc_s > acc_c
    labels = [0] * 9 + [1]
    preds = [0] * 9 + [0]
    report = compute_report(preds, labels, 2)
    assert report.acc_s > report.acc_c
    # errors concentrated in the big class: acc_s < acc_c
    labels = [0] * 9 + [1]
    preds = [1] * 5 + [0] * 4 + [1]
    report = compute_report(preds, labels, 2)
    assert report.acc_s < report.acc_c


def test_input_validation():
    with pytest.raises(ValueError):
        compute_report([0, 1], [0], 2)
    with pytest.raises(ValueError):
        compute_report([], [], 2)
    with pytest.raises(ValueError):
        compute_report([5], [0], 2)
