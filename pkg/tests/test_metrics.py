from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aat.detector import Detection
from aat.metrics import average_precision, evaluate_detections, match_detections, pseudo_label_quality
from oracles import ap_reference, match_reference


class TestAveragePrecision:
    def test_single_hit(self):
        assert average_precision([True], [0.9], 1) == 1.0

    def test_hand_example(self):
        assert average_precision([True, False, True], [0.9, 0.8, 0.7], 2) == pytest.approx(5 / 6, abs=1e-12)

    def test_all_false_positives(self):
        assert average_precision([False, False], [0.5, 0.4], 3) == 0.0

    def test_no_ground_truth(self):
        assert average_precision([], [], 0) is None
        assert average_precision([False], [0.3], 0) == 0.0

    def test_order_comes_from_scores(self):
        assert average_precision([True, False, True], [0.7, 0.8, 0.9], 2) == pytest.approx(5 / 6)

    @given(st.lists(st.booleans(), max_size=25), st.integers(0, 30))
    def test_matches_rational_reference(self, flags, extra_gt):
        n_gt = sum(flags) + extra_gt
        want = ap_reference(flags, n_gt)
        got = average_precision(flags, None, n_gt)
        if want is None:
            assert got is None or got == 0.0
        else:
            assert got == pytest.approx(float(want), abs=1e-12)

    @given(st.lists(st.tuples(st.booleans(), st.floats(0.01, 1.0)), min_size=1, max_size=15))
    def test_monotone_rescaling_invariant(self, items):
        flags = [f for f, _ in items]
        scores = np.array([s for _, s in items])
        n_gt = max(1, sum(flags))
        assert average_precision(flags, scores, n_gt) == average_precision(flags, np.exp(3 * scores) - 7, n_gt)

    @given(st.lists(st.booleans(), max_size=15), st.booleans())
    def test_appending_lowest_ranked(self, flags, hit):
        n_gt = sum(flags) + 1
        base = average_precision(flags, None, n_gt)
        after = average_precision(flags + [hit], None, n_gt)
        assert (after >= base - 1e-12) if hit else (after <= base + 1e-12)


boxes = st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(1, 8), st.integers(1, 8)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3])
)


class TestMatching:
    def test_perfect(self):
        gt = [Detection((0, 0, 10, 10), 0), Detection((20, 20, 30, 30), 1)]
        flags, fn = match_detections(gt, gt)
        assert flags == [True, True] and fn == 0

    def test_duplicate(self):
        gt = [Detection((0, 0, 10, 10), 0)]
        flags, fn = match_detections([Detection((0, 0, 10, 10), 0, 0.9), Detection((0, 0, 10, 9), 0, 0.8)], gt)
        assert flags == [True, False] and fn == 0

    def test_class_must_agree(self):
        flags, fn = match_detections([Detection((0, 0, 10, 10), 1, 0.9)], [Detection((0, 0, 10, 10), 0)])
        assert flags == [False] and fn == 1

    @given(st.lists(st.tuples(boxes, st.integers(0, 1)), max_size=6), st.lists(st.tuples(boxes, st.integers(0, 1)), max_size=6))
    @settings(max_examples=200)
    def test_matches_exhaustive_reference(self, dets, gts):
        got, _ = match_detections([Detection(b, c, 0.5) for b, c in dets], [Detection(b, c) for b, c in gts])
        assert got == match_reference(dets, gts)


class TestEvaluate:
    def test_self_evaluation_is_perfect(self):
        rng = np.random.default_rng(0)
        gts = []
        for _ in range(5):
            xy = rng.integers(0, 40, (3, 2))
            gts.append([Detection((int(x), int(y), int(x) + 12, int(y) + 12), int(c), 1.0) for (x, y), c in zip(xy, rng.integers(0, 3, 3))])
        assert evaluate_detections(gts, gts, 3).mean_ap == 1.0

    def test_absent_class_excluded(self):
        gt = [[Detection((0, 0, 10, 10), 0)]]
        dets = [[Detection((0, 0, 10, 10), 0, 0.9), Detection((30, 30, 40, 40), 1, 0.9)]]
        rep = evaluate_detections(dets, gt, 3, minority_classes=[2])
        assert rep.mean_ap == 1.0 and rep.per_class_ap[1] == 0.0 and rep.per_class_ap[2] is None
        assert rep.minority_ap is None
        assert rep.counts[1] == {"tp": 0, "fp": 1, "fn": 0, "gt": 0}

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            evaluate_detections([[]], [], 2)

    def test_dataset_level_ranking_reference(self):
        # scores are pooled across images before the precision curve is built
        rng = np.random.default_rng(5)
        for _ in range(30):
            gts, dets = [], []
            for _ in range(3):
                gts.append([Detection(tuple(int(v) for v in np.r_[p, p + 8]), 0) for p in rng.integers(0, 30, (2, 2))])
                dets.append([Detection(tuple(int(v) for v in np.r_[p, p + 8]), 0, float(s)) for p, s in zip(rng.integers(0, 30, (3, 2)), rng.uniform(size=3))])
            pooled = []
            for img, ds in enumerate(dets):
                ordered = sorted(ds, key=lambda d: (-d.score, d.box))
                flags = match_reference([(d.box, 0) for d in ordered], [(g.box, 0) for g in gts[img]])
                pooled += [(d.score, f) for d, f in zip(ordered, flags)]
            pooled.sort(key=lambda t: -t[0])
            want = ap_reference([f for _, f in pooled], 6)
            assert evaluate_detections(dets, gts, 1).per_class_ap[0] == pytest.approx(float(want), abs=1e-12)

    def test_table_and_json(self):
        rep = evaluate_detections([[Detection((0, 0, 10, 10), 0, 0.9)]], [[Detection((0, 0, 10, 10), 0)]], 1, class_names=["circle"])
        assert "circle" in rep.table()
        assert '"mean_ap": 1.0' in rep.dumps()


class TestPseudoLabelQuality:
    def test_equal_to_ground_truth(self):
        gt = [[Detection((0, 0, 10, 10), 0), Detection((20, 0, 30, 10), 1)]]
        q = pseudo_label_quality(gt, gt, 2)
        assert all(q[c]["precision"] == 1 and q[c]["recall"] == 1 for c in (0, 1))

    def test_empty_set(self):
        q = pseudo_label_quality([[]], [[Detection((0, 0, 10, 10), 0)]], 1)
        assert q[0]["precision"] is None and q[0]["recall"] == 0

    def test_half_right(self):
        gt = [[Detection((0, 0, 10, 10), 0), Detection((30, 30, 40, 40), 0)]]
        pl = [[Detection((0, 0, 10, 10), 0, 0.9), Detection((50, 50, 60, 60), 0, 0.9)]]
        q = pseudo_label_quality(pl, gt, 1)
        assert q[0]["precision"] == 0.5 and q[0]["recall"] == 0.5


def test_reference_hand_example():
    assert ap_reference([True, False, True], 2) == Fraction(5, 6)
