import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from gpsdf import metrics as M
from gpsdf.errors import DataError


def square_points(n=200, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, 3))


class TestMeshMetrics:
    def test_identical(self):
        p = square_points()
        r = M.mesh_metrics(p, p, 0.05)
        assert (r.precision, r.recall, r.f1) == (100.0, 100.0, 100.0)
        assert r.chamfer_l1_cm == 0.0

    def test_separated(self):
        gt = np.column_stack([np.linspace(0, 1, 100), np.zeros(100), np.zeros(100)])
        r = M.mesh_metrics(gt + [0, 0.1, 0], gt, 0.05)
        assert r.precision == 0.0 and r.recall == 0.0 and r.f1 == 0.0
        assert r.accuracy_cm == pytest.approx(10.0)

    def test_outliers_halve_precision(self):
        gt = square_points(100) * [1.0, 1.0, 0.0]
        pred = np.vstack([gt, gt + [0.0, 0.0, 10 * 0.05]])
        r = M.mesh_metrics(pred, gt, 0.05)
        assert r.precision == pytest.approx(50.0)
        assert r.recall == 100.0

    def test_invariants(self):
        r = M.mesh_metrics(square_points(seed=1), square_points(seed=2), 0.05)
        assert r.f1 == pytest.approx(2 * r.precision * r.recall / (r.precision + r.recall))
        assert r.chamfer_l1_cm == pytest.approx((r.accuracy_cm + r.completion_cm) / 2)
        assert r.completion_ratio == r.recall

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 0.3))
    def test_swap_symmetry(self, seed, delta):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(0, 1, (50, 2)), rng.uniform(0, 1, (70, 2))
        ab, ba = M.mesh_metrics(a, b, delta), M.mesh_metrics(b, a, delta)
        assert ab.precision == ba.recall and ab.recall == ba.precision
        assert ab.accuracy_cm == ba.completion_cm and ab.completion_cm == ba.accuracy_cm

    def test_empty(self):
        with pytest.raises(DataError):
            M.mesh_metrics(np.empty((0, 3)), square_points())


class TestSdfMetrics:
    def data(self, n=100, seed=0):
        rng = np.random.default_rng(seed)
        gt = rng.uniform(-0.5, 0.5, n)
        g = rng.normal(size=(n, 3))
        return gt, g / np.linalg.norm(g, axis=1, keepdims=True)

    def test_exact(self):
        gt, g = self.data()
        r = M.sdf_metrics(gt, g, np.ones(100, bool), gt, g)
        assert r.mae_all_cm == 0.0 and r.grad_mae_all == pytest.approx(0.0, abs=1e-7)

    def test_constant_offset(self):
        gt, g = self.data()
        pred = np.sign(gt) * (np.abs(gt) + 0.01)
        r = M.sdf_metrics(pred, g, np.ones(100, bool), gt, g)
        assert r.mae_all_cm == pytest.approx(1.0)
        assert r.mae_near_cm == pytest.approx(1.0)
        assert r.mae_far_cm == pytest.approx(1.0)

    def test_rotated_gradient(self):
        gt = np.full(4, 0.3)
        g = np.tile([1.0, 0.0], (4, 1))
        r = M.sdf_metrics(gt, np.tile([0.0, 1.0], (4, 1)), np.ones(4, bool), gt, g)
        assert r.grad_mae_all == pytest.approx(math.pi / 2)

    def test_invalid_excluded(self):
        gt, g = self.data(10)
        pred = gt.copy()
        pred[3] = np.nan
        valid = np.ones(10, bool)
        valid[5] = False
        r = M.sdf_metrics(pred, g, valid, gt, g)
        assert r.n_excluded == 2 and r.n_all == 8
        assert r.n_near + r.n_far == r.n_all

    def test_misaligned(self):
        with pytest.raises(DataError):
            M.sdf_metrics(np.zeros(3), np.zeros((4, 2)), np.ones(4, bool), np.zeros(4), np.zeros((4, 2)))


class TestTiming:
    def test_frames(self):
        r = M.timing_report([M.TimingEvent("frame", 0.1)] * 10)
        assert r.frame_seconds == pytest.approx(0.1) and r.n_frames == 10

    def test_loading_excluded(self):
        ev = [M.TimingEvent("frame", 0.2), M.TimingEvent("load", 5.0), M.TimingEvent("frame", 0.4),
              M.TimingEvent("log", 1.0)]
        assert M.timing_report(ev).frame_seconds == pytest.approx(0.3)

    def test_query_per_thousand(self):
        ev = [M.TimingEvent("query", 0.002)] * 50 + [M.TimingEvent("query_batch", 0.2, 100)]
        r = M.timing_report(ev)
        assert r.n_queries == 150
        assert r.query_1k_seconds == pytest.approx(1000 * 0.3 / 150)

    def test_empty(self):
        assert math.isnan(M.timing_report([]).frame_seconds)


class TestSampling:
    def test_triangle_samples_on_plane(self):
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], float)
        s = M.sample_mesh_surface(v, [[0, 1, 2], [1, 3, 2]], n=5000, seed=3)
        assert_allclose(s[:, 2], 0.0)
        assert np.all((s[:, :2] >= 0) & (s[:, :2] <= 1))
        # area weighting: both halves equally populated
        assert np.mean(s[:, 0] + s[:, 1] < 1) == pytest.approx(0.5, abs=0.03)

    def test_segments(self):
        s = M.sample_mesh_surface([[0, 0], [2, 0]], [[0, 1]], n=100)
        assert_allclose(s[:, 1], 0.0)

    def test_seeded(self):
        v = np.random.default_rng(0).uniform(0, 1, (10, 3))
        f = [[0, 1, 2], [3, 4, 5]]
        assert_allclose(M.sample_mesh_surface(v, f, 50, 7), M.sample_mesh_surface(v, f, 50, 7))

    def test_no_faces(self):
        assert_allclose(M.sample_mesh_surface([[1.0, 2.0]], np.empty((0, 2))), [[1.0, 2.0]])


class TestReports:
    def test_kv_round_trip(self):
        r = M.mesh_metrics(square_points(seed=1), square_points(seed=2))
        back = M.report_from_kv(M.report_to_kv(r))
        assert back["precision"] == r.precision and back["n_gt"] == r.n_gt

    def test_table(self):
        out = M.report_table(M.timing_report([M.TimingEvent("frame", 0.5)]), "timing")
        assert out.splitlines()[0] == "timing"
        assert "frame_seconds" in out
