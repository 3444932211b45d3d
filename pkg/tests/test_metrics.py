from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quantnet.metrics import (ConfusionMatrix, MetricsReport, confusion_matrix,
                              confusion_to_csv, metrics, render_comparison,
                              render_report)

# Validation-set confusion matrix of the quantized model (rows = true class).
REFERENCE_ROWS = np.array([
    [145, 13, 3, 4],
    [28, 119, 3, 14],
    [4, 6, 68, 1],
    [0, 25, 0, 140],
])
CLASSES = ["glioma", "meningioma", "no_tumor", "pituitary"]


def reference_cm() -> ConfusionMatrix:
    return ConfusionMatrix(REFERENCE_ROWS.copy(), list(CLASSES))


class TestConfusionMatrix:
    def test_perfect_predictions_diagonal(self):
        cm = confusion_matrix([0, 1, 2, 2], [0, 1, 2, 2], 3)
        np.testing.assert_array_equal(cm.counts, np.diag([1, 1, 2]))

    def test_single_pair(self):
        cm = confusion_matrix([1], [2], 4)
        assert cm.counts[1, 2] == 1 and cm.counts.sum() == 1

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        y_true = rng.integers(0, 4, 100)
        y_pred = rng.integers(0, 4, 100)
        perm = rng.permutation(100)
        a = confusion_matrix(y_true, y_pred, 4)
        b = confusion_matrix(y_true[perm], y_pred[perm], 4)
        np.testing.assert_array_equal(a.counts, b.counts)

    def test_out_of_range_label(self):
        with pytest.raises(ValueError):
            confusion_matrix([0, 5], [0, 1], 4)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            confusion_matrix([0, 1], [0], 4)

    def test_row_sums_are_supports(self):
        cm = reference_cm()
        np.testing.assert_array_equal(cm.supports(), [165, 164, 79, 165])
        assert cm.total == 573


class TestMetricsAgainstPublishedTable:
    """Per-class report of the quantized model, all cells at 2-decimal rounding."""

    EXPECTED = {
        "glioma": (0.82, 0.88, 0.85, 165),
        "meningioma": (0.73, 0.73, 0.73, 164),
        "no_tumor": (0.92, 0.86, 0.89, 79),
        "pituitary": (0.88, 0.85, 0.86, 165),
    }

    def test_every_per_class_cell(self):
        rep = metrics(reference_cm())
        for name, cls in zip(rep.class_names, rep.per_class):
            p, r, f, s = self.EXPECTED[name]
            assert round(cls.precision, 2) == p, name
            assert round(cls.recall, 2) == r, name
            assert round(cls.f1, 2) == f, name
            assert cls.support == s, name

    def test_macro_row(self):
        rep = metrics(reference_cm())
        assert round(rep.macro_precision, 2) == 0.84
        assert round(rep.macro_recall, 2) == 0.83
        assert round(rep.macro_f1, 2) == 0.83

    def test_weighted_row(self):
        rep = metrics(reference_cm())
        assert round(rep.weighted_precision, 2) == 0.83
        assert round(rep.weighted_recall, 2) == 0.82
        assert round(rep.weighted_f1, 2) == 0.82

    def test_accuracy_exact_rational(self):
        rep = metrics(reference_cm())
        assert rep.accuracy == pytest.approx(472 / 573, abs=1e-15)
        assert round(rep.accuracy * 100, 2) == 82.37

    def test_unrounded_values_exact(self):
        rep = metrics(reference_cm())
        men = rep.per_class[1]
        gli = rep.per_class[0]
        assert men.precision == pytest.approx(float(Fraction(119, 163)), abs=1e-15)
        assert gli.recall == pytest.approx(float(Fraction(145, 165)), abs=1e-15)


class TestMetricsProperties:
    def test_identity_matrix_all_ones(self):
        rep = metrics(ConfusionMatrix(np.eye(4, dtype=np.int64) * 7, list("abcd")))
        for cls in rep.per_class:
            assert (cls.precision, cls.recall, cls.f1) == (1.0, 1.0, 1.0)
        assert rep.accuracy == 1.0 and rep.macro_f1 == 1.0

    def test_empty_matrix_rejected(self):
        with pytest.raises(ValueError):
            metrics(ConfusionMatrix(np.zeros((3, 3), dtype=np.int64), list("abc")))

    def test_zero_division_convention(self):
        counts = np.array([[5, 0], [3, 0]])  # nothing predicted as class 1
        rep = metrics(ConfusionMatrix(counts, ["a", "b"]))
        assert rep.per_class[1].precision == 0.0
        assert rep.per_class[1].f1 == 0.0

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_weighted_recall_equals_accuracy(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 6))
        counts = rng.integers(0, 30, (k, k)).astype(np.int64)
        counts[0, 0] += 1  # non-empty
        rep = metrics(ConfusionMatrix(counts, [str(i) for i in range(k)]))
        assert rep.weighted_recall == pytest.approx(rep.accuracy, abs=1e-12)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_support_recall_identity(self, seed):
        rng = np.random.default_rng(seed)
        counts = rng.integers(0, 30, (4, 4)).astype(np.int64)
        counts[1, 1] += 1
        cm = ConfusionMatrix(counts, list("abcd"))
        rep = metrics(cm)
        total = cm.total
        acc = sum(s * c.recall for s, c in zip(cm.supports(), rep.per_class)) / total
        assert rep.accuracy == pytest.approx(acc, abs=1e-12)

    def test_json_round_trip(self):
        rep = metrics(reference_cm())
        back = MetricsReport.from_json(rep.to_json())
        assert back.accuracy == rep.accuracy
        assert back.per_class[2].f1 == rep.per_class[2].f1


class TestRendering:
    def test_report_row_format(self):
        text = render_report(metrics(reference_cm()))
        row = next(line for line in text.splitlines() if line.startswith("meningioma"))
        assert row.split() == ["meningioma", "0.73", "0.73", "0.73", "164"]

    def test_macro_row_rendered(self):
        text = render_report(metrics(reference_cm()))
        macro = next(line for line in text.splitlines() if line.startswith("Macro Avg"))
        assert "0.84" in macro and "0.83" in macro

    def test_comparison_table(self):
        base = metrics(reference_cm())
        quant = metrics(reference_cm())
        base = MetricsReport.from_json({**base.to_json(), "accuracy": 0.8220})
        quant = MetricsReport.from_json({**quant.to_json(), "accuracy": 0.8237})
        text = render_comparison(base, 35_340_000, quant, 5_760_000)
        assert "35.34" in text and "5.76" in text
        assert "82.20%" in text and "82.37%" in text
        assert "−0.17%" in text          # accuracy delta, baseline minus quantized
        assert "6.14×" in text and "1.00×" in text

    def test_equal_ratio_renders_one(self):
        rep = metrics(reference_cm())
        text = render_comparison(rep, 1000, rep, 1000)
        assert text.count("1.00×") == 2

    def test_csv_export(self):
        csv = confusion_to_csv(reference_cm())
        lines = csv.strip().split("\n")
        assert len(lines) == 5
        assert lines[0] == ",glioma,meningioma,no_tumor,pituitary"
        assert lines[1] == "glioma,145,13,3,4"
