"""Geometry tests: quaternion algebra, pinhole projection, plane casting.

Oracle notes
------------
* Back-projection is checked against the independent forward projection:
  walking any positive distance along backproject(px) and projecting must
  recover px.
* Ray-plane intersection is checked by substitution: the returned point has
  to satisfy both the ray equation and the plane equation.
* The single-view position inference is exercised with a rendered detection:
  project a known centroid, perturb, invert, and compare in metric space.
"""

import numpy as np
import pytest

from twinlink.geometry import (
    BehindCamera,
    CameraModel,
    NoIntersection,
    PixelOutOfBounds,
    Plane,
    Pose3D,
    Ray,
    backproject,
    infer_object_position,
    look_at,
    pose_difference,
    project,
    quat_angle,
    quat_conjugate,
    quat_from_axis_angle,
    quat_from_matrix,
    quat_multiply,
    quat_normalize,
    quat_rotate,
    quat_to_matrix,
    ray_plane_intersect,
    rotation_vector,
)

Z_UP = np.array([0.0, 0.0, 1.0])


def down_facing_camera(x=0.0, y=0.0, z=1.0):
    """Camera looking straight down at the table, image x along world x."""
    # 180 deg about x maps camera +z to world -z.
    pose = Pose3D(np.array([x, y, z]), np.array([0.0, 1.0, 0.0, 0.0]))
    return CameraModel(fx=500.0, fy=500.0, cx=320.0, cy=240.0,
                       width=640, height=480, pose=pose)


def angled_camera():
    """Desk-style camera: one meter out, looking at the table center."""
    pose = look_at([0.6, 0.0, 0.8], [0.0, 0.0, 0.0])
    return CameraModel(fx=900.0, fy=900.0, cx=640.0, cy=480.0,
                       width=1280, height=960, pose=pose)


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------

class TestQuaternions:
    def test_multiply_two_quarter_turns(self):
        qz90 = quat_from_axis_angle(Z_UP, np.pi / 2)
        qz180 = quat_multiply(qz90, qz90)
        # cos(90deg/... full half-angle: (cos 90, 0, 0, sin 90) = (0,0,0,1)
        np.testing.assert_allclose(qz180, [0.0, 0.0, 0.0, 1.0], atol=1e-12)

    def test_rotate_quarter_turn(self):
        qz90 = quat_from_axis_angle(Z_UP, np.pi / 2)
        np.testing.assert_allclose(quat_rotate(qz90, [1.0, 0.0, 0.0]),
                                   [0.0, 1.0, 0.0], atol=1e-12)

    def test_conjugate_undoes_rotation(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            q = quat_normalize(rng.normal(size=4))
            v = rng.normal(size=3)
            np.testing.assert_allclose(quat_rotate(quat_conjugate(q), quat_rotate(q, v)),
                                       v, atol=1e-9)

    def test_matrix_round_trip(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            q = quat_normalize(rng.normal(size=4))
            if q[0] < 0:
                q = -q
            q2 = quat_from_matrix(quat_to_matrix(q))
            np.testing.assert_allclose(q2, q, atol=1e-9)

    def test_rotate_matches_matrix(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            q = quat_normalize(rng.normal(size=4))
            v = rng.normal(size=3)
            np.testing.assert_allclose(quat_rotate(q, v), quat_to_matrix(q) @ v,
                                       atol=1e-10)

    def test_angle(self):
        q = quat_from_axis_angle([0.0, 1.0, 0.0], 0.3)
        assert quat_angle(q) == pytest.approx(0.3, abs=1e-12)

    def test_rotation_vector_round_trip(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            axis = rng.normal(size=3)
            angle = rng.uniform(0.0, 3.0)
            q = quat_from_axis_angle(axis, angle)
            rv = rotation_vector(q)
            assert np.linalg.norm(rv) == pytest.approx(angle, abs=1e-9)

    def test_zero_quaternion_rejected(self):
        with pytest.raises(ValueError):
            quat_normalize([0.0, 0.0, 0.0, 0.0])


class TestPose3D:
    def test_compose_translation_after_rotation(self):
        shift = Pose3D.from_xyz(1.0, 0.0, 0.0)
        turn = Pose3D(np.zeros(3), quat_from_axis_angle(Z_UP, np.pi / 2))
        p = shift.compose(turn).transform_point([1.0, 0.0, 0.0])
        # turn: (1,0,0) -> (0,1,0); shift: -> (1,1,0)
        np.testing.assert_allclose(p, [1.0, 1.0, 0.0], atol=1e-12)

    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            pose = Pose3D(rng.normal(size=3), quat_normalize(rng.normal(size=4)))
            ident = pose.compose(pose.inverse())
            assert np.linalg.norm(ident.position) < 1e-9
            qd = min(np.linalg.norm(ident.quat - [1, 0, 0, 0]),
                     np.linalg.norm(ident.quat + [1, 0, 0, 0]))
            assert qd < 1e-9

    def test_non_unit_quat_rejected(self):
        with pytest.raises(ValueError):
            Pose3D(np.zeros(3), np.array([2.0, 0.0, 0.0, 0.0]))

    def test_near_unit_quat_kept_bit_exact(self):
        # wire-decoded quats are off unit by quantization only; they must
        # survive construction untouched
        q = np.array([1.0 + 4e-12, 0.0, 0.0, 0.0])
        pose = Pose3D(np.zeros(3), q.copy())
        np.testing.assert_array_equal(pose.quat, q)

    def test_inverse_transform_round_trip(self):
        rng = np.random.default_rng(5)
        pose = Pose3D(rng.normal(size=3), quat_normalize(rng.normal(size=4)))
        p = rng.normal(size=3)
        np.testing.assert_allclose(pose.inverse().transform_point(pose.transform_point(p)),
                                   p, atol=1e-9)

    def test_pose_difference(self):
        a = Pose3D.from_xyz(0.0, 0.0, 0.0)
        b = Pose3D(np.array([3.0, 4.0, 0.0]), quat_from_axis_angle(Z_UP, 0.5))
        dp, dr = pose_difference(a, b)
        assert dp == pytest.approx(5.0)
        assert dr == pytest.approx(0.5, abs=1e-12)


# ---------------------------------------------------------------------------
# camera model and projection
# ---------------------------------------------------------------------------

class TestBackprojection:
    def test_principal_point_looks_along_minus_z(self):
        cam = down_facing_camera()
        ray = backproject(cam, (cam.cx, cam.cy))
        np.testing.assert_allclose(ray.direction, [0.0, 0.0, -1.0], atol=1e-12)
        np.testing.assert_allclose(ray.origin, [0.0, 0.0, 1.0], atol=1e-12)

    def test_one_focal_length_off_axis_gives_45_degrees(self):
        pose = Pose3D(np.array([0.0, 0.0, 1.0]), np.array([0.0, 1.0, 0.0, 0.0]))
        cam = CameraModel(fx=200.0, fy=200.0, cx=320.0, cy=240.0,
                          width=640, height=480, pose=pose)
        ray = backproject(cam, (cam.cx + cam.fx, cam.cy))
        s = 1.0 / np.sqrt(2.0)
        # camera-frame (1, 0, 1): x stays, z flips under the 180deg-about-x mount
        np.testing.assert_allclose(ray.direction, [s, 0.0, -s], atol=1e-12)

    def test_out_of_bounds_pixel_rejected(self):
        cam = down_facing_camera()
        for px in [(-1.0, 10.0), (10.0, -0.5), (640.0, 10.0), (10.0, 480.0)]:
            with pytest.raises(PixelOutOfBounds):
                backproject(cam, px)

    def test_projection_round_trip_any_depth(self):
        # Independent oracle: forward projection of a point on the ray.
        cam = angled_camera()
        rng = np.random.default_rng(23)
        for _ in range(300):
            px = rng.uniform([0.0, 0.0], [cam.width - 1e-6, cam.height - 1e-6])
            ray = backproject(cam, px)
            point = ray.at(rng.uniform(0.05, 10.0))
            np.testing.assert_allclose(project(cam, point), px, atol=1e-6)

    def test_project_behind_camera(self):
        cam = down_facing_camera()
        with pytest.raises(BehindCamera):
            project(cam, [0.0, 0.0, 2.0])  # above a down-looking camera

    def test_invalid_intrinsics_rejected(self):
        with pytest.raises(ValueError):
            CameraModel(fx=-1.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)
        with pytest.raises(ValueError):
            CameraModel(fx=500.0, fy=500.0, cx=700.0, cy=240.0, width=640, height=480)


class TestRayPlane:
    def test_vertical_hit(self):
        ray = Ray(np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, -1.0]))
        hit = ray_plane_intersect(ray, Plane.horizontal(0.0))
        np.testing.assert_allclose(hit, [0.0, 0.0, 0.0], atol=1e-12)

    def test_parallel_ray(self):
        ray = Ray(np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
        with pytest.raises(NoIntersection):
            ray_plane_intersect(ray, Plane.horizontal(0.0))

    def test_plane_behind_origin(self):
        ray = Ray(np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, 1.0]))
        with pytest.raises(BehindCamera):
            ray_plane_intersect(ray, Plane.horizontal(0.0))

    def test_substitution_oracle(self):
        # The hit must satisfy ray and plane equations simultaneously.
        rng = np.random.default_rng(31)
        for _ in range(200):
            ray = Ray(rng.normal(size=3), rng.normal(size=3))
            plane = Plane(rng.normal(size=3), rng.normal(size=3))
            try:
                hit = ray_plane_intersect(ray, plane)
            except (NoIntersection, BehindCamera):
                continue
            assert abs(np.dot(hit - plane.point, plane.normal)) < 1e-9
            off = hit - ray.origin
            t = np.dot(off, ray.direction)
            assert t >= -1e-12
            assert np.linalg.norm(off - t * ray.direction) < 1e-9


class TestInferObjectPosition:
    TABLE_Z = 0.0

    def test_overhead_centroid_recovery(self):
        # Camera 1 m above (0.2, 0.1); a 0.1 m tall object centered under it
        # sits with its centroid at z = 0.05.
        cam = down_facing_camera(0.2, 0.1, 1.0)
        pose = infer_object_position(cam, (cam.cx, cam.cy), (0.08, 0.08, 0.10),
                                     self.TABLE_Z)
        np.testing.assert_allclose(pose.position, [0.2, 0.1, 0.05], atol=1e-12)
        np.testing.assert_allclose(pose.quat, [1.0, 0.0, 0.0, 0.0], atol=1e-12)

    def test_render_invert_zero_noise(self):
        cam = angled_camera()
        size = np.array([0.08, 0.08, 0.10])
        rng = np.random.default_rng(41)
        for _ in range(200):
            truth = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 0.05])
            px = project(cam, truth)
            pose = infer_object_position(cam, px, size, self.TABLE_Z)
            assert np.linalg.norm(pose.position - truth) < 1e-6

    def test_render_invert_one_pixel_noise_median(self):
        # Millimeter-scale recovery from a one-meter viewpoint.
        cam = angled_camera()
        size = np.array([0.08, 0.08, 0.10])
        rng = np.random.default_rng(43)
        errors = []
        for _ in range(2000):
            truth = np.array([rng.uniform(-0.25, 0.25), rng.uniform(-0.3, 0.3), 0.05])
            px = project(cam, truth) + rng.uniform(-1.0, 1.0, size=2)
            pose = infer_object_position(cam, px, size, self.TABLE_Z)
            errors.append(np.linalg.norm(pose.position - truth))
        assert np.median(errors) <= 0.005

    def test_error_grows_with_noise(self):
        # Rank correlation between injected pixel noise and metric error.
        from scipy.stats import spearmanr

        cam = angled_camera()
        size = np.array([0.06, 0.06, 0.08])
        rng = np.random.default_rng(47)
        mags, errs = [], []
        for _ in range(1000):
            truth = np.array([rng.uniform(-0.25, 0.25), rng.uniform(-0.3, 0.3), 0.04])
            noise = rng.uniform(-4.0, 4.0, size=2)
            pose = infer_object_position(cam, project(cam, truth) + noise, size,
                                         self.TABLE_Z)
            mags.append(np.linalg.norm(noise))
            errs.append(np.linalg.norm(pose.position - truth))
        rho, _ = spearmanr(mags, errs)
        assert rho > 0.5

    def test_bad_size_rejected(self):
        cam = down_facing_camera()
        with pytest.raises(ValueError):
            infer_object_position(cam, (320.0, 240.0), (0.1, -0.1, 0.1), 0.0)

    def test_look_at_axes(self):
        pose = look_at([0.6, 0.0, 0.8], [0.0, 0.0, 0.0])
        np.testing.assert_allclose(pose.rotate_vector([0.0, 0.0, 1.0]),
                                   [-0.6, 0.0, -0.8], atol=1e-12)
        # image x stays horizontal
        assert abs(pose.rotate_vector([1.0, 0.0, 0.0])[2]) < 1e-12
