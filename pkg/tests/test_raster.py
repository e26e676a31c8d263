import math

import numpy as np
import pytest

from carfit.geometry import CameraIntrinsics, Pose6DoF, euler_to_matrix, matrix_to_euler
from carfit.raster import (
    MaskImage,
    RasterConfig,
    mask_iou,
    multiview_iou,
    render_mask,
    view_cameras,
    write_pgm,
    write_ppm,
)
from carfit.scenegen import SceneGenConfig, generate_scene
from carfit.shapespace import CanonicalMesh

CAM = CameraIntrinsics(1000.0, 1000.0, 320.0, 240.0)
IDENT = Pose6DoF([0, 0, 0], [0, 0, 0])


def _unit_square(depth=10.0):
    # 1x1 m square facing the camera, two triangles.
    v = np.array(
        [[-0.5, -0.5, depth], [0.5, -0.5, depth], [0.5, 0.5, depth], [-0.5, 0.5, depth]]
    )
    f = np.array([[0, 1, 2], [0, 2, 3]])
    return CanonicalMesh(v, f, car_id="square")


class TestRenderMask:
    def test_behind_camera_empty(self):
        mesh = _unit_square(depth=-5.0)
        mask = render_mask(mesh, IDENT, CAM, (640, 480))
        assert mask.count() == 0

    def test_unit_square_area_and_bounds(self):
        # f=1000, depth 10 -> 100x100 px, centered on the principal point.
        mask = render_mask(_unit_square(10.0), IDENT, CAM, (640, 480))
        assert mask.count() == pytest.approx(100 * 100, abs=2 * 100 + 1)
        ys, xs = np.nonzero(mask.bits)
        assert xs.min() >= 320 - 51 and xs.max() <= 320 + 51
        assert ys.min() >= 240 - 51 and ys.max() <= 240 + 51

    def test_area_monotone_in_depth(self):
        areas = [
            render_mask(_unit_square(d), IDENT, CAM, (640, 480)).count()
            for d in (8.0, 12.0, 20.0, 40.0)
        ]
        assert all(a >= b for a, b in zip(areas, areas[1:]))

    def test_deterministic(self, space, landmarks):
        scene, meshes = generate_scene(
            space, 1, SceneGenConfig(image_width=1200, image_height=900, focal=1000.0), seed=1
        )
        a = render_mask(meshes[0], scene.instances[0].pose, CAM, (320, 240))
        b = render_mask(meshes[0], scene.instances[0].pose, CAM, (320, 240))
        assert np.array_equal(a.bits, b.bits)

    def test_near_plane_clipping(self):
        # Quad straddling the near plane: the in-front part still renders.
        v = np.array(
            [[-0.5, -0.2, -1.0], [0.5, -0.2, -1.0], [0.5, 0.2, 3.0], [-0.5, 0.2, 3.0]]
        )
        mesh = CanonicalMesh(v, np.array([[0, 1, 2], [0, 2, 3]]), car_id="straddle")
        mask = render_mask(mesh, IDENT, CAM, (640, 480))
        assert mask.count() > 0

    def test_rigid_transform_invariance(self, space):
        scene, meshes = generate_scene(
            space, 1, SceneGenConfig(image_width=1200, image_height=900, focal=1000.0), seed=2
        )
        pose = scene.instances[0].pose
        rng = np.random.default_rng(3)
        for _ in range(5):
            G_R = euler_to_matrix(rng.uniform(-math.pi, math.pi, 3))
            G_t = rng.uniform(-5, 5, 3)
            # Move object and camera together: relative pose is unchanged
            # mathematically but recomputed through different float paths.
            R2 = G_R.T @ (G_R @ pose.matrix)
            t2 = G_R.T @ ((G_R @ pose.translation + G_t) - G_t)
            pose2 = Pose6DoF(t2, matrix_to_euler(R2))
            a = render_mask(meshes[0], pose, CAM, (480, 360))
            b = render_mask(meshes[0], pose2, CAM, (480, 360))
            assert mask_iou(a, b) >= 0.995

    def test_zero_size_rejected(self):
        with pytest.raises(ValueError):
            render_mask(_unit_square(), IDENT, CAM, (0, 100))


class TestMaskIoU:
    def _mask(self, rows):
        return MaskImage(len(rows[0]), len(rows), np.array(rows, dtype=bool))

    def test_identical(self):
        m = self._mask([[1, 1, 0], [0, 1, 0]])
        assert mask_iou(m, m) == 1.0

    def test_disjoint(self):
        a = self._mask([[1, 0], [0, 0]])
        b = self._mask([[0, 0], [0, 1]])
        assert mask_iou(a, b) == 0.0

    def test_half_overlapping_rectangles(self):
        # Equal 2x2 squares overlapping by half: IoU = 2/6 = 1/3.
        a = self._mask([[1, 1, 0], [1, 1, 0]])
        b = self._mask([[0, 1, 1], [0, 1, 1]])
        assert mask_iou(a, b) == pytest.approx(1.0 / 3.0)

    def test_both_empty(self):
        a = self._mask([[0, 0], [0, 0]])
        assert mask_iou(a, a) == 1.0

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            a = MaskImage(16, 12, rng.random((12, 16)) > 0.6)
            b = MaskImage(16, 12, rng.random((12, 16)) > 0.6)
            v = mask_iou(a, b)
            assert v == mask_iou(b, a)
            assert 0.0 <= v <= 1.0


class TestMultiview:
    @pytest.fixture(scope="class")
    def posed(self, space):
        scene, meshes = generate_scene(
            space, 1, SceneGenConfig(image_width=1200, image_height=900, focal=1000.0), seed=5
        )
        return meshes[0], scene.instances[0].pose

    def test_identical_is_exactly_one(self, posed):
        mesh, pose = posed
        cfg = RasterConfig(width=240, height=180, views=16)
        assert multiview_iou(mesh, pose, mesh, pose, cfg) == 1.0

    def test_degenerate_prediction_is_zero(self, posed):
        mesh, pose = posed
        flat = CanonicalMesh(np.zeros_like(mesh.vertices), mesh.faces, car_id="point")
        cfg = RasterConfig(width=240, height=180, views=9)
        assert multiview_iou(flat, pose, mesh, pose, cfg) == 0.0

    def test_matches_per_view_recomputation(self, posed):
        # Independent oracle: place the cameras, render each view pair
        # separately, and average.
        mesh, pose = posed
        scaled = CanonicalMesh(mesh.vertices * 0.5, mesh.faces, car_id="half")
        cfg = RasterConfig(width=240, height=180, views=9)
        got = multiview_iou(scaled, pose, mesh, pose, cfg)

        pa = pose.transform(scaled.vertices)
        pb = pose.transform(mesh.vertices)
        center = 0.5 * (pa.mean(axis=0) + pb.mean(axis=0))
        radius = max(
            np.linalg.norm(pa - center, axis=1).max(),
            np.linalg.norm(pb - center, axis=1).max(),
            0.1,
        )
        f = cfg.focal_scale * min(cfg.width, cfg.height)
        vcam = CameraIntrinsics(f, f, cfg.width / 2, cfg.height / 2)
        vals = []
        for vc in view_cameras(center, cfg.radius_scale * radius, cfg.views):
            ma = render_mask(scaled, vc.mesh_pose(pose), vcam, cfg.size())
            mb = render_mask(mesh, vc.mesh_pose(pose), vcam, cfg.size())
            vals.append(mask_iou(ma, mb))
        assert got == pytest.approx(float(np.mean(vals)), abs=1e-15)

    def test_swap_symmetric(self, posed, space):
        mesh, pose = posed
        other = CanonicalMesh(mesh.vertices * 0.8, mesh.faces, car_id="other")
        pose2 = Pose6DoF(pose.translation + [0.3, 0.0, 0.5], pose.rotation)
        cfg = RasterConfig(width=240, height=180, views=9)
        assert multiview_iou(mesh, pose, other, pose2, cfg) == multiview_iou(
            other, pose2, mesh, pose, cfg
        )

    def test_view_grid_factors(self):
        for views in (100, 16, 9, 7):
            assert len(view_cameras(np.zeros(3), 5.0, views)) == views


class TestImageFiles:
    def test_pgm_round_trip(self, tmp_path):
        bits = np.zeros((4, 6), dtype=bool)
        bits[1, 2] = True
        mask = MaskImage(6, 4, bits)
        path = tmp_path / "m.pgm"
        write_pgm(mask, path)
        raw = path.read_bytes()
        header, rest = raw.split(b"255\n", 1)
        assert header == b"P5\n6 4\n"
        data = np.frombuffer(rest, dtype=np.uint8).reshape(4, 6)
        assert data[1, 2] == 255 and data.sum() == 255

    def test_ppm_header(self, tmp_path):
        rgb = np.zeros((3, 5, 3), dtype=np.uint8)
        rgb[0, 0] = (255, 0, 0)
        path = tmp_path / "o.ppm"
        write_ppm(rgb, path)
        raw = path.read_bytes()
        assert raw.startswith(b"P6\n5 3\n255\n")
        assert len(raw) == len(b"P6\n5 3\n255\n") + 45
