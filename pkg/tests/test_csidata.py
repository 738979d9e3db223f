import numpy as np
import pytest

from c2pc.csidata import (
    CsiFormatError,
    CsiSample,
    PlyParseError,
    PointCloud,
    load_csi_container,
    preprocess,
    read_cloud,
    read_ply,
    resample_cloud,
    save_csi_container,
    unwrap_phase,
    write_ply,
)


def random_sample(rng, A=3, S=114, T=10):
    return CsiSample(
        amplitude=rng.uniform(0.0, 2.0, size=(A, S, T)).astype(np.float32),
        phase=rng.uniform(-np.pi + 1e-6, np.pi, size=(A, S, T)).astype(np.float32),
        meta={"subject": "s1", "environment": "e1", "action": "a1", "frame": 0},
    )


class TestContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        sample = random_sample(np.random.default_rng(0))
        p1, p2 = tmp_path / "a.csi", tmp_path / "b.csi"
        save_csi_container(sample, p1)
        loaded = load_csi_container(p1)
        save_csi_container(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert np.array_equal(loaded.amplitude, sample.amplitude)
        assert np.array_equal(loaded.phase, sample.phase)
        assert loaded.meta == sample.meta

    @pytest.mark.parametrize("shape", [(1, 1, 1), (2, 7, 3), (16, 2048, 4), (4, 64, 256)])
    def test_round_trip_various_shapes(self, tmp_path, shape):
        sample = random_sample(np.random.default_rng(1), *shape)
        path = tmp_path / "c.csi"
        save_csi_container(sample, path)
        loaded = load_csi_container(path)
        assert np.array_equal(loaded.amplitude, sample.amplitude)
        assert np.array_equal(loaded.phase, sample.phase)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.csi"
        path.write_bytes(b"XXXX" + b"\0" * 32)
        with pytest.raises(CsiFormatError) as err:
            load_csi_container(path)
        assert err.value.offset == 0

    def test_truncated_payload(self, tmp_path):
        sample = random_sample(np.random.default_rng(2))
        path = tmp_path / "t.csi"
        save_csi_container(sample, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CsiFormatError, match="truncated"):
            load_csi_container(path)

    def test_shape_overflow(self, tmp_path):
        import struct

        path = tmp_path / "o.csi"
        path.write_bytes(b"CSI1" + struct.pack("<IIII", 1, 1 << 20, 1 << 20, 1 << 20))
        with pytest.raises(CsiFormatError, match="out of range"):
            load_csi_container(path)


class TestPreprocess:
    def test_unwrap_adds_two_pi_at_jump(self):
        phase = np.zeros((1, 2, 1), dtype=np.float32)
        phase[0, 0, 0] = 3.0
        phase[0, 1, 0] = -3.0
        unwrapped = unwrap_phase(phase)
        np.testing.assert_allclose(unwrapped[0, :, 0], [3.0, -3.0 + 2 * np.pi], atol=1e-6)

    def test_constant_amplitude_standardizes_to_zero(self):
        rng = np.random.default_rng(3)
        sample = CsiSample(
            amplitude=np.full((2, 4, 3), 5.0, dtype=np.float32),
            phase=rng.uniform(-3, 3, size=(2, 4, 3)).astype(np.float32),
        )
        with pytest.warns(RuntimeWarning):
            out = preprocess(sample)
        np.testing.assert_allclose(out.features[:, 0, :], 0.0, atol=1e-12)

    def test_output_shape_full_config(self):
        out = preprocess(random_sample(np.random.default_rng(4)))
        assert out.features.shape == (342, 2, 10)
        assert np.array_equal(out.antenna_index, np.arange(342) // 114)
        assert np.array_equal(out.subcarrier_index, np.arange(342) % 114)

    @pytest.mark.parametrize("scale", [1e-3, 1.0, 1e4])
    def test_shape_invariant_under_scaling(self, scale):
        rng = np.random.default_rng(5)
        sample = random_sample(rng, A=2, S=5, T=4)
        scaled = CsiSample(amplitude=sample.amplitude * scale, phase=sample.phase)
        assert preprocess(scaled).features.shape == (10, 2, 4)

    def test_standardization_moments(self):
        out = preprocess(random_sample(np.random.default_rng(6)))
        for ch in (0, 1):
            assert abs(out.features[:, ch, :].mean()) < 1e-9
            assert abs(out.features[:, ch, :].var() - 1.0) < 1e-6

    def test_unwrapped_differences_in_range(self):
        rng = np.random.default_rng(7)
        sample = random_sample(rng)
        unwrapped = unwrap_phase(sample.phase)
        diffs = np.diff(unwrapped, axis=1)
        assert np.all(diffs > -np.pi) and np.all(diffs <= np.pi + 1e-12)


class TestResample:
    def test_same_size_is_permutation(self):
        rng = np.random.default_rng(8)
        pts = rng.normal(size=(1200, 3))
        out = resample_cloud(PointCloud(pts), 1200, seed=0)
        assert sorted(map(tuple, out.points)) == sorted(map(tuple, pts))

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        cloud = PointCloud(rng.normal(size=(5000, 3)))
        a = resample_cloud(cloud, 1200, seed=42)
        b = resample_cloud(cloud, 1200, seed=42)
        assert np.array_equal(a.points, b.points)

    def test_upsample_with_replacement(self):
        rng = np.random.default_rng(10)
        pts = rng.normal(size=(600, 3))
        out = resample_cloud(PointCloud(pts), 1200, seed=3)
        assert len(out) == 1200
        pool = set(map(tuple, pts))
        assert all(tuple(p) in pool for p in out.points)


class TestPly:
    def test_single_point_round_trip(self, tmp_path):
        path = tmp_path / "p.ply"
        write_ply(PointCloud([[1.0, 2.0, 3.0]]), path)
        assert "1 2 3" in path.read_text().splitlines()
        out = read_ply(path)
        np.testing.assert_allclose(out.points, [[1.0, 2.0, 3.0]])

    def test_round_trip_float32_precision(self, tmp_path):
        rng = np.random.default_rng(11)
        pts = rng.normal(size=(50, 3))
        path = tmp_path / "r.ply"
        write_ply(PointCloud(pts), path)
        out = read_ply(path)
        np.testing.assert_array_equal(out.points, pts.astype(np.float32).astype(np.float64))

    def test_vertex_count_header(self, tmp_path):
        rng = np.random.default_rng(12)
        path = tmp_path / "n.ply"
        write_ply(PointCloud(rng.normal(size=(1200, 3))), path)
        assert "element vertex 1200" in path.read_text()

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "e.ply"
        path.write_text("")
        with pytest.raises(PlyParseError):
            read_ply(path)

    def test_unsupported_element_named(self, tmp_path):
        path = tmp_path / "f.ply"
        path.write_text(
            "ply\nformat ascii 1.0\nelement vertex 1\n"
            "property float x\nproperty float y\nproperty float z\n"
            "element face 2\nproperty list uchar int vertex_indices\n"
            "end_header\n0 0 0\n3 0 1 2\n3 0 1 2\n")
        with pytest.raises(PlyParseError, match="face"):
            read_ply(path)

    def test_xyz_accepted_on_read(self, tmp_path):
        path = tmp_path / "c.xyz"
        path.write_text("0.5 1.5 -2\n3 4 5\n")
        out = read_cloud(path)
        np.testing.assert_allclose(out.points, [[0.5, 1.5, -2.0], [3.0, 4.0, 5.0]])


class TestValidation:
    def test_negative_amplitude_rejected(self):
        with pytest.raises(ValueError):
            CsiSample(amplitude=-np.ones((1, 1, 1)), phase=np.zeros((1, 1, 1)))

    def test_empty_cloud_rejected(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((0, 3)))

    def test_non_finite_cloud_rejected(self):
        with pytest.raises(ValueError):
            PointCloud([[np.nan, 0, 0]])
