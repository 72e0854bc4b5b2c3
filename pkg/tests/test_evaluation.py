import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consisaug import autodiff as ad
from consisaug.boxgeom import iou
from consisaug.data import LabeledSample
from consisaug.evaluation import (
    Detection, average_precision_50, decode_detections, evaluate, f_beta, nms, prf_at_threshold,
)
from consisaug.model import DetectorOutput, anchor_grid, init_params

GT = (20.0, 20.0, 10.0, 10.0)


def det(box, score, anchor=0, cls=0):
    return Detection(tuple(map(float, box)), cls, score, anchor)


def shifted_for_iou(target):
    # shifting a 10x10 square by dx leaves overlap a = 10 * (10 - dx); iou = a / (200 - a)
    a = 200 * target / (1 + target)
    return (GT[0] + 10 - a / 10, GT[1], GT[2], GT[3])


class TestFScores:
    def test_reported_operating_point(self):
        p, r = 0.575, 0.453
        assert round(f_beta(p, r, 1.0), 3) == 0.507
        assert round(f_beta(p, r, 2.0), 3) == 0.473

    def test_symmetric_point(self):
        assert f_beta(0.5, 0.5, 1.0) == pytest.approx(0.5)
        assert f_beta(0.5, 0.5, 2.0) == pytest.approx(0.5)

    def test_degenerate(self):
        assert f_beta(0.0, 0.0, 1.0) == 0.0 and f_beta(0.0, 0.0, 2.0) == 0.0
        assert prf_at_threshold([[]], [[GT]]) == (0.0, 0.0, 0.0, 0.0)

    @settings(max_examples=300)
    @given(st.floats(0.01, 1), st.floats(0.01, 1))
    def test_f2_leans_to_recall(self, p, r):
        f1, f2 = f_beta(p, r, 1.0), f_beta(p, r, 2.0)
        assert f1 == pytest.approx(2 * p * r / (p + r))
        assert f2 == pytest.approx(5 * p * r / (4 * p + r))
        if p > r * (1 + 1e-9):
            assert f2 < f1
        elif r > p * (1 + 1e-9):
            assert f2 > f1


class TestDecode:
    def test_uniform_head(self):
        grid = anchor_grid(16)
        k = grid.num_anchors
        out = DetectorOutput(ad.Tensor(np.full((k, 2), 0.5)), ad.Tensor(np.log(np.full((k, 2), 0.5))),
                             ad.Tensor(np.zeros((k, 4))))
        assert decode_detections(out, grid, 0.6) == []
        dets = decode_detections(out, grid, 0.0)
        assert len(dets) == k
        assert dets[5].box == tuple(grid.anchors()[5])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 1000), st.floats(0, 1), st.floats(0, 1))
    def test_monotone_in_threshold(self, seed, a, b):
        grid = anchor_grid(16)
        rng = np.random.default_rng(seed)
        p = rng.dirichlet([1, 1], grid.num_anchors)
        out = DetectorOutput(ad.Tensor(p), ad.Tensor(np.log(p)), ad.Tensor(rng.normal(size=(grid.num_anchors, 4))))
        lo, hi = sorted((a, b))
        assert {d.anchor for d in decode_detections(out, grid, hi)} <= {d.anchor for d in decode_detections(out, grid, lo)}


class TestNms:
    def test_identical(self):
        kept = nms([det(GT, 0.8, 1), det(GT, 0.9, 2)], 0.45)
        assert [d.score for d in kept] == [0.9]

    def test_disjoint(self):
        dets = [det((10, 10, 4, 4), 0.3), det((40, 40, 4, 4), 0.6, 1)]
        assert len(nms(dets)) == 2

    def test_tie_keeps_lower_anchor(self):
        assert nms([det(GT, 0.7, 9), det(GT, 0.7, 3)])[0].anchor == 3

    def test_other_class_not_suppressed(self):
        assert len(nms([det(GT, 0.9, 0, 0), det(GT, 0.8, 1, 1)])) == 2

    def test_invalid_threshold(self):
        with pytest.raises(ValueError):
            nms([], 0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.05, 1.0))
    def test_subset_ordered_idempotent(self, seed, thr):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(0, 30))
        dets = [det((*rng.uniform(0, 40, 2), *rng.uniform(2, 15, 2)), float(rng.random()), i) for i in range(n)]
        kept = nms(dets, thr)
        assert set(kept) <= set(dets)
        assert all(a.score >= b.score for a, b in zip(kept, kept[1:]))
        assert nms(kept, thr) == kept
        for i, a in enumerate(kept):
            assert all(iou(a.box, b.box) < thr for b in kept[i + 1:])


class TestAp:
    def test_perfect(self):
        gts = [[GT], [(5, 5, 4, 6), (30, 30, 8, 8)]]
        dets = [[det(g, 1.0) for g in img] for img in gts]
        assert average_precision_50(dets, gts) == 1.0
        assert prf_at_threshold(dets, gts) == (1.0, 1.0, 1.0, 1.0)

    def test_no_detections(self):
        assert average_precision_50([[]], [[GT]]) == 0.0

    def test_duplicate_after_match(self):
        a, b = shifted_for_iou(0.6), shifted_for_iou(0.7)
        assert iou(a, GT) == pytest.approx(0.6) and iou(b, GT) == pytest.approx(0.7)
        dets = [[det(a, 0.9), det(b, 0.8, 1)]]
        assert average_precision_50(dets, [[GT]]) == pytest.approx(1.0)
        assert prf_at_threshold(dets, [[GT]], 0.25)[:2] == (0.5, 1.0)

    def test_hand_curve(self):
        # ranks: TP, FP, TP over 2 gts -> precision envelope 1 then 2/3
        g2 = (50.0, 50.0, 10.0, 10.0)
        dets = [[det(GT, 0.9), det((80, 80, 5, 5), 0.8, 1), det(g2, 0.7, 2)]]
        assert average_precision_50(dets, [[GT, g2]]) == pytest.approx(0.5 * 1 + 0.5 * 2 / 3)

    def test_empty_label_images_only_add_fp(self):
        gts = [[GT], []]
        dets = [[det(GT, 0.9)], [det(GT, 0.95, 1)]]
        p, r, _, _ = prf_at_threshold(dets, gts)
        assert (p, r) == (0.5, 1.0)

    def test_rank_invariance(self):
        rng = np.random.default_rng(0)
        gts = [[tuple(rng.uniform(10, 50, 2)) + (10.0, 10.0) for _ in range(3)] for _ in range(4)]
        dets = [[det(np.asarray(g) + rng.normal(scale=2, size=4) * [1, 1, 0.2, 0.2], float(rng.random()), i)
                 for i, g in enumerate(img)] + [det((5, 5, 4, 4), float(rng.random()), 9)] for img in gts]
        base = average_precision_50(dets, gts)
        warped = [[Detection(d.box, d.class_id, float(np.exp(3 * d.score) / 30), d.anchor) for d in img] for img in dets]
        assert average_precision_50(warped, gts) == base
        assert 0 < base < 1


def test_evaluate_is_deterministic():
    rng = np.random.default_rng(1)
    data = [LabeledSample(rng.random((3, 16, 16)), np.array([[8.0, 8.0, 10.0, 10.0]]), np.array([0]), str(i))
            for i in range(3)]
    params = init_params(0, image_size=16).student
    a = evaluate(params, data, anchor_grid(16))
    b = evaluate(params, data, anchor_grid(16))
    assert a == b
    assert a.conf_threshold == 0.25 and a.nms_iou == 0.45
    assert set(a.as_dict()) >= {"precision", "recall", "map50", "f1", "f2", "tp", "fp", "fn"}
    with pytest.raises(ValueError):
        evaluate(params, [], anchor_grid(16))
