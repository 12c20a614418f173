import numpy as np
import pytest

from openworld.boxes import Box, ScoredBox, area, aspect_ratio, iou, iou_matrix, nms

import oracles


def rand_box(rng, span=100.0, min_side=1.0, max_side=40.0):
    x = rng.uniform(0, span)
    y = rng.uniform(0, span)
    w = rng.uniform(min_side, max_side)
    h = rng.uniform(min_side, max_side)
    return Box(x=x, y=y, w=w, h=h)


class TestIoU:
    def test_identity(self):
        b = Box(3, 4, 10, 20)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 10, 10), Box(100, 100, 5, 5)) == 0.0

    def test_touching_boxes_have_zero_iou(self):
        assert iou(Box(0, 0, 10, 10), Box(10, 0, 10, 10)) == 0.0

    def test_hand_computed_overlap(self):
        # intersection 9x9 = 81, union 200 - 81 = 119
        v = iou(Box(0, 0, 10, 10), Box(1, 1, 10, 10))
        assert v == pytest.approx(81 / 119, abs=1e-12)

    def test_against_rasterization_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            a, b = rand_box(rng), rand_box(rng)
            assert iou(a, b) == pytest.approx(
                oracles.iou_rasterized(a, b, resolution=600), abs=2e-2
            )

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(11)
        for _ in range(300):
            a, b = rand_box(rng), rand_box(rng)
            v = iou(a, b)
            assert 0.0 <= v <= 1.0
            assert v == iou(b, a)
            assert iou(a, a) == 1.0

    def test_iou_matrix_matches_scalar(self):
        rng = np.random.default_rng(3)
        rows = [rand_box(rng) for _ in range(6)]
        cols = [rand_box(rng) for _ in range(4)]
        m = iou_matrix(rows, cols)
        for i, a in enumerate(rows):
            for j, b in enumerate(cols):
                assert m[i, j] == pytest.approx(iou(a, b), abs=1e-12)


class TestBoxValidation:
    @pytest.mark.parametrize("w,h", [(0, 10), (10, 0), (-1, 5), (5, -2)])
    def test_degenerate_extent_rejected(self, w, h):
        with pytest.raises(ValueError):
            Box(0, 0, w, h)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            Box(float("nan"), 0, 1, 1)

    def test_score_range(self):
        with pytest.raises(ValueError):
            ScoredBox(Box(0, 0, 1, 1), 1.5)


class TestAreaAspect:
    def test_square(self):
        b = Box(0, 0, 40, 40)
        assert area(b) == 1600.0
        assert aspect_ratio(b) == 1.0

    def test_wide_boundary(self):
        assert aspect_ratio(Box(0, 0, 100, 25)) == 4.0

    def test_tall_below_boundary(self):
        assert aspect_ratio(Box(0, 0, 10, 50)) == pytest.approx(0.2)


class TestNms:
    def test_overlapping_pair_keeps_the_stronger(self):
        a = ScoredBox(Box(0, 0, 10, 10), 0.9)
        b = ScoredBox(Box(1, 1, 10, 10), 0.8)  # IoU ~ 0.68 with a
        assert nms([b, a], 0.3) == [a]

    def test_disjoint_boxes_both_survive(self):
        a = ScoredBox(Box(0, 0, 10, 10), 0.9)
        c = ScoredBox(Box(50, 50, 10, 10), 0.5)
        assert nms([c, a], 0.3) == [a, c]

    def test_single_box(self):
        a = ScoredBox(Box(0, 0, 10, 10), 0.7)
        assert nms([a], 0.3) == [a]

    def test_empty(self):
        assert nms([], 0.5) == []

    def test_tie_breaks_by_input_index(self):
        first = ScoredBox(Box(0, 0, 10, 10), 0.5)
        second = ScoredBox(Box(2, 2, 10, 10), 0.5)
        assert nms([first, second], 0.3) == [first]
        assert nms([second, first], 0.3) == [second]

    def test_matches_quadratic_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            n = int(rng.integers(0, 50))
            boxes = [
                ScoredBox(rand_box(rng, span=60), float(rng.integers(0, 20)) / 20)
                for _ in range(n)
            ]
            thr = float(rng.uniform(0.05, 0.9))
            assert nms(boxes, thr) == oracles.nms_quadratic(boxes, thr, iou)

    def test_idempotent(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            boxes = [ScoredBox(rand_box(rng, span=40), float(rng.random())) for _ in range(20)]
            once = nms(boxes, 0.3)
            assert nms(once, 0.3) == once

    def test_no_surviving_pair_overlaps(self):
        rng = np.random.default_rng(13)
        boxes = [ScoredBox(rand_box(rng, span=30), float(rng.random())) for _ in range(60)]
        kept = nms(boxes, 0.25)
        for i, a in enumerate(kept):
            for b in kept[i + 1 :]:
                assert iou(a.box, b.box) <= 0.25

    def test_threshold_validated(self):
        with pytest.raises(ValueError):
            nms([], 1.5)
