import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relfuse.harness.metrics import Detection, ap_summary, average_precision, decode, iou

from oracles import MICRO_AP50, MICRO_DETS, MICRO_GTS, exhaustive_ap


def as_dets(per_image):
    return [[Detection(b, c) for b, c in ds] for ds in per_image]


class TestDecode:
    def test_single_delta_peak(self):
        hm = np.zeros((8, 8))
        hm[3, 5] = 0.9
        sizes = np.full((2, 8, 8), 2.5)
        (d,) = decode(hm, sizes, threshold=0.3)
        assert d.confidence == 0.9
        assert d.box == (5 * 4 + 1.5, 3 * 4 + 1.5, 10.0, 10.0)

    def test_below_threshold(self):
        assert decode(np.full((6, 6), 0.2), np.ones((2, 6, 6))) == []

    def test_equal_peaks_ordered_by_row_col(self):
        hm = np.zeros((8, 8))
        hm[5, 1] = hm[2, 6] = hm[2, 3] = 0.8
        dets = decode(hm, np.ones((2, 8, 8)), refine=False)
        assert [d.box[:2] for d in dets] == [(3 * 4 + 1.5, 2 * 4 + 1.5), (6 * 4 + 1.5, 2 * 4 + 1.5),
                                            (1 * 4 + 1.5, 5 * 4 + 1.5)]

    def test_plateau_yields_one_detection(self):
        hm = np.zeros((6, 6))
        hm[2, 2] = hm[2, 3] = 0.7
        dets = decode(hm, np.ones((2, 6, 6)), refine=False)
        assert len(dets) == 1 and dets[0].box[0] == 2 * 4 + 1.5

    def test_max_dets_and_order(self):
        rng = np.random.default_rng(0)
        hm = np.zeros((16, 16))
        for i, (r, c) in enumerate([(1, 1), (1, 5), (1, 9), (5, 1), (5, 5), (9, 9)]):
            hm[r, c] = 0.4 + 0.1 * i
        dets = decode(hm, rng.uniform(1, 3, (2, 16, 16)), max_dets=4)
        assert len(dets) == 4
        assert [d.confidence for d in dets] == sorted((d.confidence for d in dets), reverse=True)

    def test_refinement_recovers_gaussian_center(self):
        vv, uu = np.mgrid[0:16, 0:16]
        u0, v0 = 6.3, 9.8
        hm = np.exp(-((uu - u0) ** 2 + (vv - v0) ** 2) / 2)
        (d,) = decode(hm, np.ones((2, 16, 16)))
        assert d.box[0] == pytest.approx(4 * u0 + 1.5, abs=1e-9)
        assert d.box[1] == pytest.approx(4 * v0 + 1.5, abs=1e-9)


class TestIoU:
    def test_identical(self):
        assert iou((5, 5, 4, 4), (5, 5, 4, 4)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 2, 2), (10, 10, 2, 2)) == 0.0

    def test_half_overlap(self):
        assert iou((0, 0, 2, 2), (1, 0, 2, 2)) == pytest.approx(2 / 6)


class TestAveragePrecision:
    def test_micro_corpus_hand_value(self):
        assert average_precision(as_dets(MICRO_DETS), MICRO_GTS, 0.5) == pytest.approx(MICRO_AP50, abs=1e-12)

    @pytest.mark.parametrize("thr", [0.1, 0.5, 0.75, 0.85, 0.95])
    def test_micro_corpus_matches_exhaustive(self, thr):
        got = average_precision(as_dets(MICRO_DETS), MICRO_GTS, thr)
        assert got == pytest.approx(exhaustive_ap(MICRO_DETS, MICRO_GTS, thr), abs=1e-9)

    def test_perfect(self):
        gts = [[(10.0, 10.0, 4.0, 4.0)], [(20.0, 20.0, 6.0, 6.0), (40.0, 40.0, 6.0, 6.0)]]
        dets = [[Detection(g, 1.0) for g in img] for img in gts]
        assert average_precision(dets, gts) == 1.0

    def test_no_matches(self):
        gts = [[(10.0, 10.0, 4.0, 4.0)]]
        assert average_precision([[Detection((30.0, 30.0, 4.0, 4.0), 0.9)]], gts) == 0.0

    def test_no_gt_no_dets_flagged(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert average_precision([[]], [[]]) == 1.0
        assert "no ground truth" in caplog.text

    def test_no_gt_with_dets(self):
        assert average_precision([[Detection((1.0, 1.0, 2.0, 2.0), 0.5)]], [[]]) == 0.0

    @pytest.mark.parametrize("thr", [0.0, 1.0, -0.2])
    def test_threshold_range(self, thr):
        with pytest.raises(ValueError):
            average_precision([[]], [[(1.0, 1.0, 1.0, 1.0)]], thr)

    def test_summary_keys(self):
        s = ap_summary(as_dets(MICRO_DETS), MICRO_GTS)
        assert set(s) == {"ap50", "ap75", "ap5095"}
        assert s["ap50"] >= s["ap75"]


def _random_corpus(seed, n_img=4):
    rng = np.random.default_rng(seed)
    gts, dets = [], []
    confs = iter(rng.permutation(1000)[:200] / 1000 + 1e-4)
    for _ in range(n_img):
        g = [tuple(map(float, (rng.uniform(10, 50), rng.uniform(10, 50), rng.uniform(4, 12), rng.uniform(4, 12))))
             for _ in range(rng.integers(0, 4))]
        d = []
        for box in g:
            if rng.uniform() < 0.8:
                jitter = rng.normal(0, 1.5, 4) * np.array([1, 1, 0.5, 0.5])
                d.append((tuple(map(float, np.array(box) + jitter)), float(next(confs))))
        for _ in range(rng.integers(0, 3)):
            d.append(((float(rng.uniform(0, 60)), float(rng.uniform(0, 60)), 6.0, 6.0), float(next(confs))))
        gts.append(g)
        dets.append(d)
    return gts, dets


class TestAPProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6))
    def test_matches_exhaustive_oracle(self, seed):
        gts, dets = _random_corpus(seed)
        if not any(gts):
            return
        for thr in (0.3, 0.5, 0.7):
            assert average_precision(as_dets(dets), gts, thr) == pytest.approx(exhaustive_ap(dets, gts, thr), abs=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6))
    def test_invariant_to_list_order(self, seed):
        gts, dets = _random_corpus(seed)
        rng = np.random.default_rng(seed)
        shuffled = [list(np.array(d, dtype=object)[rng.permutation(len(d))]) if d else [] for d in dets]
        assert average_precision(as_dets(dets), gts) == average_precision(as_dets(shuffled), gts)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6))
    def test_monotone_in_threshold(self, seed):
        gts, dets = _random_corpus(seed)
        aps = [average_precision(as_dets(dets), gts, t) for t in np.arange(0.5, 0.96, 0.05)]
        assert all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))
