"""PLY ingest, crop, normalization, and object-frame assembly."""

import math

import numpy as np
import pytest

from blockwind.cloud import (
    PointCloud,
    load_cloud,
    normalize,
    object_frame_from_axes,
    save_cloud,
    crop,
)
from blockwind.errors import DegenerateAxes, DegenerateCloud, EmptyCloud, ParseError

ASCII_3PT = """ply
format ascii 1.0
comment three points
element vertex 3
property float x
property float y
property float z
end_header
0.0 0.0 0.0
1.0 0.0 0.0
0.0 2.0 0.5
"""


class TestLoadCloud:
    def test_minimal_ascii(self, tmp_path):
        p = tmp_path / "tri.ply"
        p.write_text(ASCII_3PT)
        cloud = load_cloud(p)
        assert len(cloud) == 3
        np.testing.assert_allclose(cloud.points[2], [0.0, 2.0, 0.5])
        assert cloud.colors is None

    def test_binary_matches_ascii_twin(self, tmp_path):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-1, 1, size=(57, 3))
        cols = rng.integers(0, 256, size=(57, 3), dtype=np.uint8)
        src = PointCloud(pts, cols)
        pa, pb = tmp_path / "a.ply", tmp_path / "b.ply"
        save_cloud(src, pa, binary=False)
        save_cloud(src, pb, binary=True)
        ca, cb = load_cloud(pa), load_cloud(pb)
        np.testing.assert_array_equal(ca.points, cb.points)
        np.testing.assert_array_equal(ca.colors, cb.colors)
        np.testing.assert_allclose(ca.points, pts, atol=1e-6)

    def test_missing_vertex_element(self, tmp_path):
        p = tmp_path / "bad.ply"
        p.write_text("ply\nformat ascii 1.0\nelement face 1\nproperty float x\nend_header\n")
        with pytest.raises(ParseError):
            load_cloud(p)

    def test_not_a_ply(self, tmp_path):
        p = tmp_path / "nope.ply"
        p.write_text("OFF\n3 0 0\n")
        with pytest.raises(ParseError):
            load_cloud(p)

    def test_zero_vertices(self, tmp_path):
        p = tmp_path / "empty.ply"
        p.write_text(
            "ply\nformat ascii 1.0\nelement vertex 0\n"
            "property float x\nproperty float y\nproperty float z\nend_header\n"
        )
        with pytest.raises(EmptyCloud):
            load_cloud(p)

    def test_truncated_binary(self, tmp_path):
        p = tmp_path / "trunc.ply"
        header = (
            "ply\nformat binary_little_endian 1.0\nelement vertex 4\n"
            "property float x\nproperty float y\nproperty float z\nend_header\n"
        )
        p.write_bytes(header.encode() + b"\x00" * 20)  # needs 48 bytes
        with pytest.raises(ParseError, match="truncated"):
            load_cloud(p)

    def test_ascii_bad_value_reports_line(self, tmp_path):
        p = tmp_path / "badval.ply"
        p.write_text(ASCII_3PT.replace("0.0 2.0 0.5", "0.0 banana 0.5"))
        with pytest.raises(ParseError, match="badval.ply:3"):
            load_cloud(p)


class TestCrop:
    def test_box_containing_all_is_identity(self):
        pts = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
        out = crop(PointCloud(pts), [-5, -5, -5], [5, 5, 5])
        np.testing.assert_array_equal(out.points, pts)

    def test_box_containing_none(self):
        with pytest.raises(EmptyCloud):
            crop(PointCloud(np.zeros((2, 3))), [1, 1, 1], [2, 2, 2])

    def test_unit_cube_corners_to_half_box(self):
        corners = np.array(
            [[x, y, z] for x in (0.0, 1.0) for y in (0.0, 1.0) for z in (0.0, 1.0)]
        )
        out = crop(PointCloud(corners), [0, 0, 0], [0.5, 0.5, 0.5])
        assert len(out) == 1
        np.testing.assert_array_equal(out.points[0], [0.0, 0.0, 0.0])

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        cloud = PointCloud(rng.uniform(-2, 2, size=(100, 3)))
        once = crop(cloud, [-1, -1, -1], [1, 1, 1])
        twice = crop(once, [-1, -1, -1], [1, 1, 1])
        np.testing.assert_array_equal(once.points, twice.points)

    def test_order_preserved_with_colors(self):
        pts = np.array([[0.0, 0, 0], [9.0, 9, 9], [0.1, 0, 0]])
        cols = np.array([[1, 2, 3], [4, 5, 6], [7, 8, 9]], dtype=np.uint8)
        out = crop(PointCloud(pts, cols), [-1, -1, -1], [1, 1, 1])
        np.testing.assert_array_equal(out.colors, [[1, 2, 3], [7, 8, 9]])


class TestNormalize:
    def test_symmetric_pair(self):
        out, params = normalize(PointCloud(np.array([[0.0, 0, 0], [2.0, 0, 0]])))
        np.testing.assert_allclose(params.center, [1.0, 0.0, 0.0])
        assert params.radius == pytest.approx(1.0)
        np.testing.assert_allclose(out.points, [[-1, 0, 0], [1, 0, 0]])

    def test_unit_cube_corners(self):
        corners = np.array(
            [[x, y, z] for x in (0.0, 1.0) for y in (0.0, 1.0) for z in (0.0, 1.0)]
        )
        _, params = normalize(PointCloud(corners))
        np.testing.assert_allclose(params.center, [0.5, 0.5, 0.5])
        assert params.radius == pytest.approx(math.sqrt(3) / 2, abs=1e-9)
        assert params.scale == pytest.approx(1.15470, abs=1e-5)

    def test_repeated_point_degenerate(self):
        with pytest.raises(DegenerateCloud):
            normalize(PointCloud(np.ones((5, 3))))

    def test_max_norm_exactly_one(self):
        rng = np.random.default_rng(2)
        for seed in range(20):
            pts = np.random.default_rng(seed).uniform(-7, 3, size=(rng.integers(2, 400), 3))
            out, _ = normalize(PointCloud(pts))
            assert np.linalg.norm(out.points, axis=1).max() == pytest.approx(1.0, abs=1e-9)

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        once, _ = normalize(PointCloud(rng.uniform(0, 10, size=(50, 3))))
        again, params = normalize(once)
        assert np.linalg.norm(params.center) < 1e-9
        assert params.radius == pytest.approx(1.0, abs=1e-9)

    def test_params_json_round_trip(self):
        from blockwind.cloud import NormalizationParams

        p = NormalizationParams(np.array([1.0, 2.0, 3.0]), 0.7)
        back = NormalizationParams.from_json_dict(p.to_json_dict())
        np.testing.assert_array_equal(back.center, p.center)
        assert back.radius == p.radius
        assert back.scale == pytest.approx(1 / 0.7)


class TestObjectFrame:
    def test_axis_aligned_identity(self):
        frame = object_frame_from_axes([1, 0, 0], [0, 0, 1])
        np.testing.assert_allclose(frame.rotation.as_matrix(), np.eye(3), atol=1e-12)

    def test_gram_schmidt_snaps_z(self):
        frame = object_frame_from_axes([1, 0, 0], [0.1, 0, 1])
        m = frame.rotation.as_matrix()
        np.testing.assert_allclose(m[:, 2], [0, 0, 1], atol=1e-12)
        np.testing.assert_allclose(m[:, 0], [1, 0, 0], atol=1e-12)

    def test_parallel_axes_rejected(self):
        with pytest.raises(DegenerateAxes):
            object_frame_from_axes([1, 0, 0], [1, 1e-9, 0])

    def test_nearly_antiparallel_rejected(self):
        with pytest.raises(DegenerateAxes):
            object_frame_from_axes([1, 0, 0], [-1, 0.01, 0])

    def test_always_right_handed_orthonormal(self):
        rng = np.random.default_rng(4)
        built = 0
        while built < 100:
            x, z = rng.standard_normal(3), rng.standard_normal(3)
            try:
                frame = object_frame_from_axes(x, z)
            except DegenerateAxes:
                continue
            m = frame.rotation.as_matrix()
            np.testing.assert_allclose(m.T @ m, np.eye(3), atol=1e-9)
            assert np.linalg.det(m) == pytest.approx(1.0, abs=1e-9)
            built += 1
