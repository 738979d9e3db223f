import numpy as np
import pytest

from c2pc.csidata import PointCloud
from c2pc.evaluation import (
    DegenerateRegistrationError,
    MetricsReport,
    bench_latency,
    evaluate,
    icp_register,
    nearest_neighbors,
    rigid_fit,
)
from c2pc.kdtree import KDTree
from c2pc.model import PointCloudModel, tiny_config


def brute_nn(query, target):
    d2 = ((query[:, None, :] - target[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1), np.sqrt(d2.min(axis=1))


def rotation_about(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis /= np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


class TestKDTree:
    def test_self_query(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(100, 3))
        idx, dist = KDTree(pts).query(pts)
        assert np.array_equal(idx, np.arange(100))
        np.testing.assert_allclose(dist, 0.0)

    @pytest.mark.parametrize("n", [1, 2, 17, 128, 512])
    def test_matches_brute_force(self, n):
        rng = np.random.default_rng(n)
        target = rng.normal(size=(n, 3))
        query = rng.normal(size=(64, 3))
        idx, dist = KDTree(target).query(query)
        bidx, bdist = brute_nn(query, target)
        assert np.array_equal(idx, bidx)
        np.testing.assert_allclose(dist, bdist, atol=1e-12)

    def test_single_point_target(self):
        rng = np.random.default_rng(1)
        query = rng.normal(size=(20, 3))
        idx, _ = KDTree(np.array([[0.0, 0.0, 0.0]])).query(query)
        assert np.all(idx == 0)

    def test_tie_breaks_to_lowest_index(self):
        # duplicated points: every query must resolve to the first copy
        rng = np.random.default_rng(2)
        base = rng.normal(size=(40, 3))
        target = np.vstack([base, base])
        idx, _ = KDTree(target).query(base)
        assert np.all(idx < 40)

    def test_many_duplicates_and_collinear(self):
        target = np.zeros((50, 3))
        target[:, 0] = np.repeat(np.arange(10), 5)
        query = target + 1e-12
        idx, _ = KDTree(target).query(query)
        bidx, _ = brute_nn(query, target)
        assert np.array_equal(idx, bidx)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            KDTree(np.zeros((0, 3)))


class TestNearestNeighbors:
    def test_identity(self):
        rng = np.random.default_rng(3)
        pts = PointCloud(rng.normal(size=(64, 3)))
        idx, dist = nearest_neighbors(pts, pts)
        assert np.array_equal(idx, np.arange(64))
        np.testing.assert_allclose(dist, 0.0)

    def test_random_vs_brute(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            target = rng.normal(size=(int(rng.integers(1, 513)), 3))
            query = rng.normal(size=(int(rng.integers(1, 100)), 3))
            idx, dist = nearest_neighbors(query, target)
            bidx, bdist = brute_nn(query, target)
            assert np.array_equal(idx, bidx)


class TestRigidFit:
    def test_recovers_random_transform(self):
        rng = np.random.default_rng(5)
        src = rng.normal(size=(100, 3))
        rot = rotation_about(rng.normal(size=3), 0.7)
        t = np.array([0.3, -0.2, 1.0])
        fit_rot, fit_t = rigid_fit(src, src @ rot.T + t)
        np.testing.assert_allclose(fit_rot, rot, atol=1e-10)
        np.testing.assert_allclose(fit_t, t, atol=1e-10)

    def test_reflection_corrected(self):
        # degenerate planar cloud where plain SVD can return a reflection
        rng = np.random.default_rng(6)
        src = rng.normal(size=(50, 3))
        src[:, 2] = 0.0
        rot, _ = rigid_fit(src, src[:, [1, 0, 2]])
        assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-9)


class TestIcp:
    def test_identity_registration(self):
        rng = np.random.default_rng(7)
        pts = rng.uniform(size=(200, 3))
        res = icp_register(pts, pts.copy(), threshold=0.5)
        np.testing.assert_allclose(res.rotation, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(res.translation, 0.0, atol=1e-9)
        assert res.fitness == 1.0
        assert res.inlier_rmse == pytest.approx(0.0, abs=1e-12)

    def test_recovers_construction(self):
        rng = np.random.default_rng(8)
        target = rng.uniform(size=(500, 3))
        rot = rotation_about([0.0, 0.0, 1.0], np.deg2rad(10.0))
        source = (target - rot.T @ np.array([0.1, 0.05, 0.0])) @ rot  # inverse transform
        res = icp_register(source, target, threshold=0.5)
        assert res.fitness == 1.0
        assert res.inlier_rmse < 1e-6
        moved = res.transform(source)
        np.testing.assert_allclose(moved, target, atol=1e-6)

    def test_disjoint_clouds_degenerate(self):
        rng = np.random.default_rng(9)
        a = rng.uniform(size=(50, 3))
        b = a + np.array([10.0, 0.0, 0.0])
        with pytest.raises(DegenerateRegistrationError) as err:
            icp_register(a, b, threshold=0.05)
        assert err.value.partial is not None
        assert err.value.partial.degenerate

    def test_mse_monotone_and_rotation_orthonormal(self):
        rng = np.random.default_rng(10)
        for trial in range(10):
            target = rng.uniform(size=(300, 3))
            rot = rotation_about(rng.normal(size=3), rng.uniform(0, np.deg2rad(15)))
            shift = rng.uniform(-0.2, 0.2, size=3)
            source = (target - shift) @ rot
            res = icp_register(source, target, threshold=0.5)
            diffs = np.diff(res.mse_history)
            assert np.all(diffs <= 1e-12), f"trial {trial}: MSE increased"
            np.testing.assert_allclose(res.rotation @ res.rotation.T, np.eye(3), atol=1e-9)
            assert np.linalg.det(res.rotation) == pytest.approx(1.0, abs=1e-9)

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError):
            icp_register(np.zeros((2, 3)), np.ones((5, 3)))


class _OracleModel:
    """Stand-in model that returns whatever ground truth it is given."""

    def __init__(self, clouds):
        self._preds = iter(clouds)

    def predict(self, inp):
        return PointCloud(next(self._preds))


class TestEvaluate:
    def _dataset(self, rng, n=4):
        clouds = [rng.uniform(size=(60, 3)) for _ in range(n)]
        inputs = [object() for _ in range(n)]  # oracle model never touches these
        return clouds, list(zip(inputs, [PointCloud(c) for c in clouds]))

    def test_oracle_model_perfect(self):
        rng = np.random.default_rng(11)
        clouds, dataset = self._dataset(rng)

        class Oracle:
            def __init__(self):
                self.i = -1

            def predict(self, inp):
                self.i += 1
                return PointCloud(clouds[self.i])

        # hasattr(features) is False for the placeholder inputs, so give each
        # dataset element features-like inputs the oracle ignores
        dataset = [(_FeatureStub(), gt) for _, gt in dataset]
        report = evaluate(Oracle(), dataset, threshold=0.05)
        assert report.mean_fitness == 1.0
        assert report.mean_rmse == pytest.approx(0.0, abs=1e-12)

    def test_predict_ground_truth_flag(self):
        rng = np.random.default_rng(12)
        _, dataset = self._dataset(rng)
        dataset = [(_FeatureStub(), gt) for _, gt in dataset]
        report = evaluate(None, dataset, threshold=0.05, predict_ground_truth=True)
        assert report.mean_fitness == 1.0

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            evaluate(None, [], threshold=0.05)

    def test_degenerate_recorded_not_raised(self):
        rng = np.random.default_rng(13)
        gt = PointCloud(rng.uniform(size=(50, 3)) + 100.0)

        class FarModel:
            def predict(self, inp):
                return PointCloud(rng.uniform(size=(50, 3)))

        report = evaluate(FarModel(), [(_FeatureStub(), gt)], threshold=0.05)
        assert report.fitness == [0.0]
        assert report.degenerate_flags == [True]

    def test_aggregate_permutation_invariant(self):
        rng = np.random.default_rng(14)
        _, dataset = self._dataset(rng, n=5)
        dataset = [(_FeatureStub(), gt) for _, gt in dataset]
        a = evaluate(None, dataset, threshold=0.05, predict_ground_truth=True)
        b = evaluate(None, dataset[::-1], threshold=0.05, predict_ground_truth=True)
        assert a.mean_fitness == b.mean_fitness
        assert a.mean_rmse == b.mean_rmse

    def test_report_serialization(self, tmp_path):
        report = MetricsReport([1.0, 0.5], [0.01, 0.02], [False, False], 0.05)
        report.write_json(tmp_path / "r.json")
        report.write_csv(tmp_path / "r.csv")
        import json

        data = json.loads((tmp_path / "r.json").read_text())
        assert data["mean_fitness"] == 0.75
        assert len((tmp_path / "r.csv").read_text().splitlines()) == 3


class _FeatureStub:
    features = None


class TestBench:
    def test_stats_shape_and_ordering(self):
        model = PointCloudModel(tiny_config(), seed=0)
        stats = bench_latency(model, n_warmup=1, n_runs=10)
        assert len(stats["samples_ms"]) == 10
        assert stats["min_ms"] <= stats["mean_ms"] <= stats["max_ms"]
        assert stats["p50_ms"] <= stats["p95_ms"]

    def test_n_runs_validated(self):
        model = PointCloudModel(tiny_config(), seed=0)
        with pytest.raises(ValueError):
            bench_latency(model, n_runs=0)
