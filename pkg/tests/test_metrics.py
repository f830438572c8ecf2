import math

import numpy as np
import pytest

from wsloc.dataset import SpatialAnnotation
from wsloc.metrics import (EvalReport, classification_ap, closest_box, distance_error, localization_ap,
                           localization_match, mean_distance_errors, pr_curve, read_report,
                           write_pr_curves, write_report)


def threshold_oracle_ap(conf, hits, npos):
    """AP by sweeping every threshold, then integrating the precision envelope over recall."""
    points = []
    for t in sorted(set(conf), reverse=True):
        sel = [h for c, h in zip(conf, hits) if c >= t]
        tp = sum(sel)
        points.append((tp / npos, tp / len(sel)))
    ap, prev_r = 0.0, 0.0
    for r, _ in points:
        if r > prev_r:
            ap += (r - prev_r) * max(p for rr, p in points if rr >= r)
            prev_r = r
    return ap


def ann(cid, x0, y0, x1, y1):
    return SpatialAnnotation(cid, (x0, y0, x1, y1), ((x0 + x1) / 2, (y0 + y1) / 2))


def brute_match(peak, boxes, tol):
    best = None
    for i, b in enumerate(boxes):
        x0, y0, x1, y1 = b.bbox
        dx = max(x0 - peak[0], 0, peak[0] - x1)
        dy = max(y0 - peak[1], 0, peak[1] - y1)
        key = (math.sqrt(dx * dx + dy * dy), math.dist(peak, b.center), i)
        best = min(best, key) if best else key
    if best is None:
        return False
    x0, y0, x1, y1 = boxes[best[2]].bbox
    return x0 - tol <= peak[0] <= x1 + tol and y0 - tol <= peak[1] <= y1 + tol


class TestClassificationAP:
    def test_perfect_ranking(self):
        aps, m, _ = classification_ap(np.array([[0.9], [0.8], [0.2]]), np.array([[1], [1], [0]]))
        assert aps[0] == 1.0 and m == 1.0

    def test_worked_example(self):
        aps, _, _ = classification_ap(np.array([[0.9], [0.8], [0.3]]), np.array([[1], [0], [1]]))
        assert aps[0] == pytest.approx(5 / 6, abs=1e-12)
        assert round(aps[0], 4) == 0.8333

    def test_reversal(self):
        labels = np.array([[1], [0]])
        assert classification_ap(np.array([[0.9], [0.1]]), labels)[0][0] == 1.0
        assert classification_ap(np.array([[0.1], [0.9]]), labels)[0][0] == 0.5

    def test_matches_threshold_oracle(self, rng):
        for _ in range(50):
            n = int(rng.integers(2, 201))
            conf = rng.random((n, 3))
            labels = (rng.random((n, 3)) < rng.uniform(0.1, 0.9)).astype(int)
            labels[0] = 1
            aps, _, _ = classification_ap(conf, labels)
            for c in range(3):
                expect = threshold_oracle_ap(list(conf[:, c]), list(labels[:, c]), labels[:, c].sum())
                assert abs(aps[c] - expect) < 1e-9

    def test_monotone_invariance(self, rng):
        conf = rng.random((40, 2))
        labels = (rng.random((40, 2)) < 0.4).astype(int)
        labels[0] = 1
        a, _, _ = classification_ap(conf, labels)
        b, _, _ = classification_ap(np.exp(5 * conf) - 3, labels)
        np.testing.assert_array_equal(a, b)

    def test_class_without_positives(self, caplog):
        aps, m, _ = classification_ap(np.array([[0.9, 0.5], [0.1, 0.4]]), np.array([[1, 0], [0, 0]]),
                                      ["a", "b"])
        assert math.isnan(aps[1]) and m == 1.0
        assert "b" in caplog.text

    def test_ties_keep_input_order(self):
        cv = pr_curve([0.5, 0.5, 0.5], [0, 1, 1])
        np.testing.assert_array_equal(cv.hits, [0, 1, 1])
        np.testing.assert_allclose(cv.precision, [0, 0.5, 2 / 3])

    def test_curve_invariants(self, rng):
        cv = pr_curve(rng.random(50), rng.random(50) < 0.3)
        assert np.all(np.diff(cv.recall) >= 0) and 0 <= cv.ap <= 1


class TestMatch:
    def test_inside(self):
        assert localization_match((15, 15), [ann(0, 10, 10, 20, 20)], 0) == (True, 0)

    @pytest.mark.parametrize("x,expect", [(205, True), (208, True), (208.5, False), (215, False)])
    def test_tolerance_boundary(self, x, expect):
        box = ann(0, 150, 100, 200, 160)
        assert localization_match((x, 130), [box], 8)[0] is expect

    def test_vertical_and_corner_boundary(self):
        box = ann(0, 150, 100, 200, 160)
        assert localization_match((170, 92), [box], 8)[0]
        assert not localization_match((170, 91.9), [box], 8)[0]
        assert localization_match((208, 168), [box], 8)[0]  # the grown box is a rectangle

    def test_closest_box_wins(self):
        a, b = ann(0, 0, 0, 10, 10), ann(0, 40, 0, 50, 10)
        hit, idx = localization_match((36, 5), [a, b], 8)
        assert hit and idx == 1
        hit, idx = localization_match((25, 5), [a, b], 8)
        assert not hit and idx == 0

    def test_overlapping_boxes_use_center(self):
        big, small = ann(0, 0, 0, 100, 100), ann(0, 60, 60, 70, 70)
        assert closest_box((64, 64), [big, small]) == 1

    def test_no_boxes(self):
        assert localization_match((1, 1), [], 8) == (False, None)

    def test_against_brute_force(self, rng):
        for _ in range(300):
            boxes = []
            for _ in range(int(rng.integers(1, 4))):
                x0, y0 = rng.uniform(0, 100, 2)
                boxes.append(ann(0, x0, y0, x0 + rng.uniform(1, 30), y0 + rng.uniform(1, 30)))
            peak = tuple(rng.uniform(-10, 140, 2))
            assert localization_match(peak, boxes, 8)[0] == brute_match(peak, boxes, 8)


def random_loc_fixture(rng, n, c=3):
    present = (rng.random((n, c)) < 0.6).astype(int)
    present[0] = 1
    conf = rng.random((n, c))
    boxes, peaks = [], []
    for i in range(n):
        row_boxes, row_peaks = [], []
        for k in range(c):
            if present[i, k]:
                for _ in range(int(rng.integers(1, 3))):
                    x0, y0 = rng.uniform(0, 140, 2)
                    row_boxes.append(ann(k, x0, y0, x0 + rng.uniform(5, 20), y0 + rng.uniform(5, 20)))
            row_peaks.append(tuple(rng.integers(0, 160, 2)))
        boxes.append(row_boxes)
        peaks.append(row_peaks)
    return conf, peaks, present, boxes


class TestLocalizationAP:
    def test_all_inside_and_all_outside(self):
        boxes = [[ann(0, 0, 0, 10, 10)], [ann(0, 50, 50, 60, 60)]]
        present = np.array([[1], [1]])
        conf = np.array([[0.3], [0.9]])
        inside = [[(5, 5)], [(55, 55)]]
        outside = [[(40, 40)], [(0, 0)]]
        assert localization_ap(conf, inside, present, boxes, 8)[0][0] == 1.0
        assert localization_ap(conf, outside, present, boxes, 8)[0][0] == 0.0

    def test_absent_frames_ignored(self):
        boxes = [[ann(0, 0, 0, 10, 10)], []]
        aps, _, curves = localization_ap(np.array([[0.2], [0.99]]), [[(5, 5)], [(80, 80)]],
                                         np.array([[1], [0]]), boxes, 8)
        assert aps[0] == 1.0 and curves[0].hits.size == 1

    def test_matches_threshold_oracle(self, rng):
        for _ in range(50):
            n = int(rng.integers(5, 201))
            conf, peaks, present, boxes = random_loc_fixture(rng, n)
            aps, _, _ = localization_ap(conf, peaks, present, boxes, 8)
            for c in range(3):
                idx = [i for i in range(n) if present[i, c]]
                hits = [int(brute_match(peaks[i][c], [b for b in boxes[i] if b.class_id == c], 8)) for i in idx]
                expect = threshold_oracle_ap([conf[i, c] for i in idx], hits, len(idx))
                assert abs(aps[c] - expect) < 1e-9

    def test_tolerance_monotone(self, rng):
        conf, peaks, present, boxes = random_loc_fixture(rng, 80)
        maps = [localization_ap(conf, peaks, present, boxes, t)[1] for t in (0, 4, 8, 16)]
        assert all(a <= b for a, b in zip(maps, maps[1:]))


class TestDistance:
    def test_worked_example(self):
        assert math.hypot(480, 854) == pytest.approx(979.65, abs=5e-3)
        err = distance_error((100, 100), (130, 140), (480, 854))
        assert abs(err - 100 * 50 / math.hypot(480, 854)) < 1e-12
        assert abs(err - 5.10) < 5e-3

    def test_zero_and_full(self):
        assert distance_error((3, 4), (3, 4), (10, 20)) == 0.0
        assert distance_error((0, 0), (20, 10), (10, 20)) == pytest.approx(100.0)

    def test_scale_invariant(self):
        a = distance_error((10, 20), (30, 5), (96, 160))
        b = distance_error((30, 60), (90, 15), (288, 480))
        assert a == pytest.approx(b, rel=1e-14)

    def test_mean_uses_closest_center(self):
        boxes = [[ann(0, 0, 0, 10, 10), ann(0, 90, 90, 100, 100)], [ann(0, 0, 0, 10, 10)]]
        d = mean_distance_errors([[(95, 95)], [(5, 5)]], np.array([[1], [1]]), boxes, (100, 100), 1)
        assert d[0] == 0.0


def test_report_round_trip(tmp_path):
    cv = pr_curve([0.9, 0.2], [1, 0])
    rep = EvalReport(["a", "b"], np.array([1.0, np.nan]), np.array([0.5, np.nan]), np.array([3.25, np.nan]),
                     1.0, 0.5, 3.25, [cv, cv], [cv, cv])
    write_report(rep, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "class,classification_ap,localization_ap,mean_distance_pct"
    assert lines[-1] == "mAP,1.0,0.5,3.25"
    back = read_report(tmp_path / "m.csv")
    assert back["a"]["localization_ap"] == 0.5 and math.isnan(back["b"]["classification_ap"])
    write_pr_curves([cv, cv], ["a", "b"], tmp_path / "pr.csv")
    assert (tmp_path / "pr.csv").read_text().splitlines()[1] == "a,1,0.9,1.0,1.0"
