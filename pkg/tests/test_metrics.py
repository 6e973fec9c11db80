import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semaug.metrics import (
    calibrate_tau,
    harmonic_mean,
    mean_average_precision,
    overlap_coefficient,
    routing_accuracy,
    routing_metrics,
)
from semaug.numerics import SeededRng


class TestHarmonicMean:
    @pytest.mark.parametrize("t,g,h", [(76.8, 49.9, 60.5), (1.4, 50.6, 2.7), (85.4, 36.1, 50.7)])
    def test_reported_values(self, t, g, h):
        assert abs(harmonic_mean(t, g) - h) <= 0.05

    def test_zero_convention(self):
        assert harmonic_mean(0.0, 0.0) == 0.0

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_bounds_and_symmetry(self, a, b):
        h = harmonic_mean(a, b)
        assert h == pytest.approx(harmonic_mean(b, a))
        assert min(a, b) - 1e-12 <= h <= max(a, b) + 1e-12

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            harmonic_mean(-0.1, 0.5)


def _box(cx, cy, w, h):
    return np.array([[cx, cy, w, h]])


class TestMap:
    def test_perfect(self):
        gts = [(np.array([0, 1]), np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]]))]
        preds = [(np.array([0, 1]), np.array([0.9, 0.8]), gts[0][1])]
        assert mean_average_precision(preds, gts, 2) == 1.0

    def test_no_predictions(self):
        gts = [(np.array([0]), _box(0.5, 0.5, 0.2, 0.2))]
        assert mean_average_precision([(np.array([]), np.array([]), np.zeros((0, 4)))], gts, 1) == 0.0

    def test_iou_point_six(self):
        # same height, widths 0.2 and 0.12 nested: IoU = 0.12 / 0.2 = 0.6
        gts = [(np.array([0]), _box(0.5, 0.5, 0.2, 0.2))]
        preds = [(np.array([0]), np.array([1.0]), _box(0.5, 0.5, 0.12, 0.2))]
        assert mean_average_precision(preds, gts, 1) == pytest.approx(0.3, abs=1e-12)

    def test_duplicate_is_false_positive(self):
        gts = [(np.array([0]), _box(0.5, 0.5, 0.2, 0.2))]
        preds = [(np.array([0, 0]), np.array([0.9, 0.8]), np.repeat(_box(0.5, 0.5, 0.2, 0.2), 2, 0))]
        assert mean_average_precision(preds, gts, 1) == 1.0

    def test_categories_without_gt_are_skipped(self):
        gts = [(np.array([0]), _box(0.5, 0.5, 0.2, 0.2))]
        preds = [(np.array([0, 1]), np.array([0.9, 0.95]), np.repeat(_box(0.5, 0.5, 0.2, 0.2), 2, 0))]
        assert mean_average_precision(preds, gts, 3) == 1.0


class TestRouting:
    def test_separated(self):
        acc, ov = routing_metrics([0.1, 0.2], [0.8, 0.9], 0.5)
        assert acc == 1.0 and ov == 0.0

    def test_identical(self):
        e = [0.1, 0.2, 0.3, 0.4]
        acc, ov = routing_metrics(e, e, 0.25)
        assert ov == 1.0 and acc == 0.5

    def test_two_bin_example(self):
        assert overlap_coefficient([0.1, 0.1, 0.3], [0.3, 0.5, 0.5], bins=2) == pytest.approx(1 / 3)

    def test_two_bin_exact_edges(self):
        # p = (2/3, 1/3), q = (0, 1)
        got = overlap_coefficient([0.25, 0.25, 0.75], [0.75, 1.25, 1.25], bins=2)
        assert got == pytest.approx(1 / 3, abs=1e-15)

    def test_boundary_routes_pretrained(self):
        assert routing_accuracy([0.5], [0.5], 0.5) == 0.5

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            routing_metrics([], [1.0], 0.5)


def _scan_best(a, b):
    """Brute force: every threshold in a fine grid plus every observed value and midpoint."""
    vals = np.unique(np.concatenate([a, b]))
    cands = np.concatenate([vals, (vals[:-1] + vals[1:]) / 2, [vals[0] - 1, vals[-1] + 1]])
    return max(routing_accuracy(a, b, t) for t in cands)


class TestCalibrateTau:
    def test_separated_picks_gap_midpoint(self):
        assert calibrate_tau([0.1, 0.2], [0.6, 0.7]) == pytest.approx(0.4)

    def test_route_everything_augmented(self):
        tau = calibrate_tau([0.1, 0.3, 0.5, 0.7], [0.7])
        assert routing_accuracy([0.1, 0.3, 0.5, 0.7], [0.7], tau) == 0.8

    def test_identical_lists(self):
        e = [0.1, 0.2, 0.3]
        tau = calibrate_tau(e, e)
        assert routing_accuracy(e, e, tau) <= 0.5 + 1e-12

    def test_matches_scan(self):
        rng = SeededRng(5)
        for i in range(300):
            r = rng.child(str(i))
            a = np.round(r.normal(int(r.integers(1, 20)), 0.0, 1.0), 1)
            b = np.round(r.normal(int(r.integers(1, 20)), 0.8, 1.0), 1)
            tau = calibrate_tau(a, b)
            assert routing_accuracy(a, b, tau) == pytest.approx(_scan_best(a, b), abs=1e-12)

    @settings(max_examples=50)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=10),
           st.lists(st.floats(0, 1), min_size=1, max_size=10))
    def test_tie_breaks_to_smallest(self, a, b):
        tau = calibrate_tau(a, b)
        best = routing_accuracy(a, b, tau)
        vals = np.unique(np.concatenate([a, b]))
        cands = np.concatenate([vals[:1], (vals[:-1] + vals[1:]) / 2])
        for m in cands[cands < tau]:
            assert routing_accuracy(a, b, m) < best
