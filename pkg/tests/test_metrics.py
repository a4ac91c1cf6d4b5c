import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesionnet import metrics as MT
from lesionnet.errors import DegenerateError, SizeError, TaxonomyError, UndefinedRecallError
from lesionnet.metrics import ClassRow, ConfusionMatrix

import oracles as O


class TestConfusion:
    def test_perfect(self):
        cm = MT.confusion_matrix(["a", "b", "a"], ["a", "b", "a"], ["a", "b"])
        assert cm.counts.tolist() == [[2, 0], [0, 1]]

    def test_constant_predictor(self):
        cm = MT.confusion_matrix(["a", "b", "c", "b"], ["a"] * 4, ["a", "b", "c"])
        assert cm.counts[:, 0].tolist() == [1, 2, 1]
        assert cm.counts[:, 1:].sum() == 0

    def test_hand_tally(self):
        true = ["a", "a", "b", "b", "c", "c"]
        pred = ["a", "b", "b", "c", "c", "a"]
        cm = MT.confusion_matrix(true, pred, ["a", "b", "c"])
        assert cm.counts.tolist() == [[1, 1, 0], [0, 1, 1], [1, 0, 1]]

    def test_unknown_label(self):
        with pytest.raises(TaxonomyError):
            MT.confusion_matrix(["a"], ["z"], ["a", "b"])

    def test_length_mismatch(self):
        with pytest.raises(SizeError):
            MT.confusion_matrix(["a"], ["a", "a"], ["a"])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
    def test_totals(self, pairs):
        true, pred = zip(*pairs)
        cm = MT.confusion_matrix(true, pred, range(4))
        assert cm.total == len(pairs)
        for k in range(4):
            tp = cm.counts[k, k]
            fn = cm.counts[k].sum() - tp
            assert tp + fn == true.count(k)

    def test_csv(self):
        cm = MT.confusion_matrix(["a", "b"], ["b", "b"], ["a", "b"])
        assert cm.to_csv() == "true\\pred,a,b\na,0,1\nb,0,1\n"


class TestPrecisionRecall:
    def _cm(self, tp, fp, fn):
        return ConfusionMatrix(np.array([[tp, fn], [fp, 0]]), ("c", "other"))

    def test_formula(self):
        pr = MT.precision_recall(self._cm(9, 1, 3), "c")
        assert (pr.precision, pr.recall, pr.degenerate) == (0.9, 0.75, False)

    def test_empty_class(self):
        cm = ConfusionMatrix(np.array([[0, 0], [0, 5]]), ("c", "other"))
        assert MT.precision_recall(cm, 0) == (0.0, 0.0, True)

    def test_no_false_positives(self):
        assert MT.precision_recall(self._cm(7, 0, 2), 0).precision == 1.0

    def test_bad_index(self):
        with pytest.raises(IndexError):
            MT.precision_recall(self._cm(1, 1, 1), 5)


class TestPRCurve:
    def test_perfect(self):
        c = MT.pr_curve([0.9, 0.1], [1, 0])
        assert c.recall.tolist() == [1.0, 1.0]
        assert c.precision.tolist() == [1.0, 0.5]
        assert MT.average_precision(c) == 1.0

    def test_two_positive_example(self):
        c = MT.pr_curve([0.9, 0.8, 0.7], [1, 0, 1])
        assert c.thresholds.tolist() == [0.9, 0.8, 0.7]
        assert np.allclose(c.recall, [0.5, 0.5, 1.0])
        assert np.allclose(c.precision, [1.0, 0.5, 2 / 3])
        assert MT.average_precision(c) == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-15)

    def test_all_tied(self):
        c = MT.pr_curve([0.3] * 5, [1, 0, 0, 1, 0])
        assert len(c.thresholds) == 1
        assert (c.recall[0], c.precision[0]) == (1.0, 0.4)
        assert MT.average_precision(c) == pytest.approx(0.4)

    def test_no_positives(self):
        with pytest.raises(UndefinedRecallError):
            MT.pr_curve([0.2, 0.1], [0, 0])

    def test_length_mismatch(self):
        with pytest.raises(SizeError):
            MT.pr_curve([0.2, 0.1], [1])

    def test_csv(self):
        text = MT.pr_curve([0.9, 0.1], [1, 0]).to_csv()
        assert text.splitlines()[0] == "threshold,recall,precision"
        assert text.splitlines()[1] == "0.9,1.0,1.0"

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 200), st.sampled_from([2, 5, 50, 10**6]))
    def test_bruteforce_oracle(self, seed, n, levels):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, n)
        labels[rng.integers(n)] = 1
        scores = rng.integers(0, levels, n) / levels
        ap = MT.average_precision(MT.pr_curve(scores, labels))
        assert abs(ap - O.average_precision_bruteforce(scores.tolist(), labels.tolist())) <= 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 40))
    def test_ap_one_iff_separated(self, seed, n):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 1, 0
        scores = rng.integers(0, 6, n).astype(float)
        separated = scores[labels == 1].min() > scores[labels == 0].max()
        assert (MT.average_precision(MT.pr_curve(scores, labels)) == 1.0) == separated

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, 30)
        labels[0] = 1
        scores = rng.integers(0, 8, 30) / 8
        perm = rng.permutation(30)
        a = MT.pr_curve(scores, labels)
        b = MT.pr_curve(scores[perm], labels[perm])
        assert np.array_equal(a.recall, b.recall) and np.array_equal(a.precision, b.precision)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_curve_invariants(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, 25)
        labels[3] = 1
        c = MT.pr_curve(rng.uniform(size=25), labels)
        assert np.all(np.diff(c.recall) >= 0)
        assert np.all(np.diff(c.thresholds) < 0)
        assert np.all((c.precision >= 0) & (c.precision <= 1))


class TestAggregate:
    def test_weighted_and_macro(self):
        rep = MT.aggregate_report([ClassRow("a", 1, 0.0, 0.0, 0.0), ClassRow("b", 3, 1.0, 1.0, 1.0)])
        assert rep.weighted.precision == 0.75
        assert rep.macro.precision == 0.5
        assert rep.headline is rep.weighted

    def test_identical_rows(self):
        rep = MT.aggregate_report([ClassRow(str(i), i + 1, 0.3, 0.6, 0.9) for i in range(4)])
        assert rep.weighted.precision == pytest.approx(0.3, abs=1e-15)
        assert rep.weighted.ap == pytest.approx(0.9, abs=1e-15)

    def test_zero_support(self):
        with pytest.raises(DegenerateError):
            MT.aggregate_report([ClassRow("a", 0, 0.5, 0.5, 0.5)])

    def test_no_rows(self):
        with pytest.raises(DegenerateError):
            MT.aggregate_report([])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 50), st.floats(0, 1)), min_size=1, max_size=8))
    def test_weighted_formula_and_bounds(self, items):
        if sum(s for s, _ in items) == 0:
            items[0] = (1, items[0][1])
        rows = [ClassRow(str(i), s, v, v, v) for i, (s, v) in enumerate(items)]
        rep = MT.aggregate_report(rows)
        sup = np.array([s for s, _ in items], dtype=float)
        val = np.array([v for _, v in items])
        assert abs(rep.weighted.recall - (sup * val).sum() / sup.sum()) <= 1e-12
        lo, hi = val[sup > 0].min(), val[sup > 0].max()
        assert lo - 1e-12 <= rep.weighted.precision <= hi + 1e-12

    def test_csv(self):
        rep = MT.aggregate_report([ClassRow("a", 1, 0.0, 0.0, 0.0), ClassRow("b", 3, 1.0, 1.0, 1.0)])
        assert rep.to_csv().splitlines() == [
            "class,support,precision,recall,ap",
            "a,1,0.0,0.0,0.0",
            "b,3,1.0,1.0,1.0",
            "weighted,4,0.75,0.75,0.75",
            "macro,4,0.5,0.5,0.5",
        ]


class TestThreeClass:
    @pytest.mark.parametrize(
        "label,group",
        [
            ("melanoma", "melanoma"),
            ("basal-cell-carcinoma", "non-melanoma-cancer"),
            ("actinic-keratosis", "non-melanoma-cancer"),
            ("nevus", "benign"),
            ("benign-keratosis", "benign"),
            ("dermatofibroma", "benign"),
            ("vascular-lesion", "benign"),
        ],
    )
    def test_mapping(self, label, group):
        assert MT.map_to_3class(label) == group

    def test_unknown(self):
        with pytest.raises(TaxonomyError):
            MT.map_to_3class("freckle")


class TestBuildReport:
    def test_rows_and_curves(self):
        true = ["a", "a", "b", "c"]
        pred = ["a", "b", "b", "b"]
        scores = np.array([[0.9, 0.1, 0.0], [0.4, 0.6, 0.0], [0.2, 0.7, 0.1], [0.3, 0.5, 0.2]])
        rep, curves = MT.build_report(MT.confusion_matrix(true, pred, "abc"), scores, true)
        assert [r.support for r in rep.rows] == [2, 1, 1]
        assert rep.rows[0].precision == 1.0 and rep.rows[0].recall == 0.5
        assert rep.rows[1].precision == pytest.approx(1 / 3)
        assert rep.degenerate == ["c"]
        assert set(curves) == {"a", "b", "c"}
        assert rep.rows[0].ap == 1.0

    def test_absent_class_has_zero_ap(self):
        cm = MT.confusion_matrix(["a", "a"], ["a", "b"], "ab")
        rep, curves = MT.build_report(cm, np.array([[0.9, 0.1], [0.4, 0.6]]), ["a", "a"])
        assert "b" not in curves
        assert rep.rows[1].ap == 0.0


class TestPlots:
    def test_png_deterministic(self, tmp_path):
        curve = MT.pr_curve([0.9, 0.8, 0.7, 0.2], [1, 0, 1, 0], "melanoma")
        cm = MT.confusion_matrix(list("abca"), list("abba"), "abc")
        for i in range(2):
            MT.plot_pr_curve(curve, tmp_path / f"pr{i}.png")
            MT.plot_confusion(cm, tmp_path / f"cm{i}.png")
        for name in ("pr", "cm"):
            a = (tmp_path / f"{name}0.png").read_bytes()
            assert a[:8] == b"\x89PNG\r\n\x1a\n"
            assert a == (tmp_path / f"{name}1.png").read_bytes()
