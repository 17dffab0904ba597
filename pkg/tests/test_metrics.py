import json
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from errors import ArgumentError
from metrics import (
    ConfusionMatrix,
    build_report,
    cancer_class_weight,
    confusion,
    evaluate,
    f1,
    format_confusion_matrix,
    format_report,
    ppv,
    sensitivity,
    specificity,
    unweighted_log_loss,
    weighted_log_loss,
)


class ConstantModel:
    """Stand-in network returning fixed probabilities"""

    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=np.float32)

    def predict_proba(self, batch):
        return np.repeat(self.probs[None, :], len(batch), axis=0)


class Dataset:
    def __init__(self, labels):
        self.labels = np.asarray(labels)
        self.images = np.zeros((len(labels), 1, 2, 2), np.float32)

    def __len__(self):
        return len(self.labels)


def probs_for(true_class_probs, labels):
    p_cancer = np.where(np.asarray(labels) == 1, true_class_probs, 1 - np.asarray(true_class_probs))
    return np.stack([1 - p_cancer, p_cancer], axis=1)


class TestConfusion:
    def test_perfect_agreement(self):
        assert confusion([1, 1, 0], [1, 1, 0]) == ConfusionMatrix(tp=2, fp=0, tn=1, fn=0)

    def test_total_disagreement(self):
        cm = confusion([0, 0, 1], [1, 1, 0])
        assert cm.tp == 0 and cm.tn == 0
        assert cm.n == 3

    def test_against_counting_loop(self):
        rng = np.random.default_rng(0)
        preds = rng.integers(0, 2, 1000)
        labels = rng.integers(0, 2, 1000)
        counts = {"tp": 0, "fp": 0, "tn": 0, "fn": 0}
        for p, y in zip(preds, labels):
            key = ("t" if p == y else "f") + ("p" if p == 1 else "n")
            counts[key] += 1
        assert confusion(preds, labels) == ConfusionMatrix(**counts)

    def test_ratios_against_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n = int(rng.integers(1, 40))
            preds = rng.integers(0, 2, n)
            labels = rng.integers(0, 2, n)
            cm = confusion(preds, labels)
            tp = sum(1 for p, y in zip(preds, labels) if p == 1 and y == 1)
            fp = sum(1 for p, y in zip(preds, labels) if p == 1 and y == 0)
            tn = sum(1 for p, y in zip(preds, labels) if p == 0 and y == 0)
            fn = n - tp - fp - tn
            assert cm == ConfusionMatrix(tp=tp, fp=fp, tn=tn, fn=fn)
            for value, num, den in ((sensitivity(cm), tp, tp + fn),
                                    (specificity(cm), tn, tn + fp),
                                    (ppv(cm), tp, tp + fp)):
                if den:
                    assert abs(value - num / den) <= 1e-12
                else:
                    assert math.isnan(value)

    def test_invalid_inputs(self):
        with pytest.raises(ArgumentError):
            confusion([1, 0], [1])
        with pytest.raises(ArgumentError):
            confusion([], [])
        with pytest.raises(ArgumentError):
            confusion([2], [1])


class TestRatios:
    def test_screening_magnitudes(self):
        assert sensitivity(ConfusionMatrix(tp=87, fp=0, tn=0, fn=13)) == pytest.approx(0.87)
        assert specificity(ConfusionMatrix(tp=0, fp=9, tn=991, fn=0)) == pytest.approx(0.991)

    def test_boundary(self):
        assert sensitivity(ConfusionMatrix(tp=5, fp=3, tn=2, fn=0)) == 1.0

    def test_zero_denominators_are_nan(self):
        cm = ConfusionMatrix(tp=0, fp=0, tn=4, fn=0)
        assert math.isnan(sensitivity(cm))
        assert math.isnan(ppv(cm))
        assert specificity(cm) == 1.0

    def test_f1(self):
        assert f1(1.0, 1.0) == 1.0
        assert f1(0.3, 0.3) == pytest.approx(0.3)
        assert f1(0.5, 1.0) == pytest.approx(0.666667, abs=1e-6)
        assert math.isnan(f1(0.0, 0.0))
        assert math.isnan(f1(math.nan, 0.5))

    def test_f1_between_min_and_mean(self):
        rng = np.random.default_rng(1)
        for a, b in rng.uniform(0.01, 1.0, size=(100, 2)):
            value = f1(a, b)
            assert min(a, b) - 1e-12 <= value <= (a + b) / 2 + 1e-12
            assert value <= math.sqrt(a * b) + 1e-12


class TestLogLoss:
    def test_hand_example(self):
        labels = [1, 0, 0]
        probs = probs_for([0.8, 0.9, 0.6], labels)
        assert cancer_class_weight(labels) == 2.0
        assert weighted_log_loss(probs, labels) == pytest.approx(0.3541577, abs=1e-6)

    def test_perfect_predictions_hit_clip_floor(self):
        labels = [1, 0, 1, 0]
        loss = weighted_log_loss(probs_for([1.0, 1.0, 1.0, 1.0], labels), labels)
        assert 0.0 < loss <= 3.5e-14

    def test_uniform_balanced(self):
        labels = [1, 0, 1, 0]
        assert weighted_log_loss(np.full((4, 2), 0.5), labels) == pytest.approx(math.log(2))

    def test_balanced_equals_unweighted(self):
        rng = np.random.default_rng(2)
        labels = np.repeat([0, 1], 50)
        probs = probs_for(rng.uniform(0.01, 0.99, 100), labels)
        q = probs[np.arange(100), labels]
        direct = float(np.mean(-np.log(q)))
        assert abs(weighted_log_loss(probs, labels) - direct) < 1e-12
        assert abs(unweighted_log_loss(probs, labels) - direct) < 1e-12

    def test_single_class_is_undefined(self):
        labels = [0, 0, 0]
        probs = probs_for([0.9, 0.8, 0.7], labels)
        assert math.isnan(weighted_log_loss(probs, labels))
        assert unweighted_log_loss(probs, labels) == pytest.approx(
            -(math.log(0.9) + math.log(0.8) + math.log(0.7)) / 3)


class TestReport:
    def test_perfect_classifier(self):
        labels = np.array([1, 0, 1, 0, 0])
        report = build_report(probs_for(np.full(5, 0.9999), labels), labels)
        assert report.sensitivity == report.specificity == report.f1 == 1.0
        assert report.weighted_log_loss < 1e-3
        assert report.flags == []

    def test_constant_half_predictor(self):
        report = evaluate(ConstantModel([0.5, 0.5]), Dataset([1, 0, 1, 0]))
        assert report.accuracy == 0.5
        assert report.sensitivity == 1.0
        assert report.specificity == 0.0
        assert report.tpr == report.sensitivity
        assert report.balanced_accuracy == 0.5

    def test_undefined_metrics_are_flagged(self):
        report = evaluate(ConstantModel([0.9, 0.1]), Dataset([0, 0, 0]))
        assert "sensitivity_undefined" in report.flags
        assert "ppv_undefined" in report.flags
        assert "f1_undefined" in report.flags
        assert "weighted_log_loss_undefined_single_class" in report.flags
        assert report.specificity == 1.0
        assert report.unweighted_log_loss == pytest.approx(-math.log(0.9), rel=1e-6)

    def test_json_schema(self):
        report = evaluate(ConstantModel([0.9, 0.1]), Dataset([0, 0, 0]))
        data = json.loads(report.to_json())
        for key in ("sensitivity", "specificity", "ppv", "tpr", "f1", "accuracy", "weighted_log_loss",
                    "tp", "fp", "tn", "fn", "n", "threshold", "flags"):
            assert key in data
        assert data["sensitivity"] is None
        assert data["weighted_log_loss"] is None
        assert data["n"] == 3 and data["tn"] == 3
        assert data["class_counts"] == {"cancer": 0, "cancer_free": 3}

    def test_threshold_uses_greater_or_equal(self):
        labels = np.array([1, 0])
        probs = np.array([[0.3, 0.7], [0.3, 0.7]])
        assert build_report(probs, labels, threshold=0.7).confusion.fp == 1
        assert build_report(probs, labels, threshold=0.71).confusion.tn == 1

    def test_empty_dataset(self):
        with pytest.raises(ArgumentError):
            evaluate(ConstantModel([0.5, 0.5]), Dataset([]))

    def test_text_forms(self):
        report = evaluate(ConstantModel([0.2, 0.8]), Dataset([1, 1, 0, 1]))
        text = format_report(report)
        header = text.splitlines()[0].split()
        assert header[:3] == ["Sensitivity", "Specificity", "F1"]
        block = format_confusion_matrix(report.confusion)
        assert "rows: actual" in block
        assert "TPR 100.0%" in block
        assert "TNR   0.0%" in block
        assert_allclose(report.ppv, 0.75)
