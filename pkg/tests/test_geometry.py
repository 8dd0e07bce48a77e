import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskvla.geometry import (BBox, CameraCalibration, Pixel, PointBehindCamera,
                              Pose7, direction_words, pose_delta, project_point,
                              wrap_angle)


def identity_calib(fx=1.0, fy=1.0, cx=0.0, cy=0.0, w=128, h=128):
    return CameraCalibration(fx=fx, fy=fy, cx=cx, cy=cy,
                             rotation=np.eye(3), translation=np.zeros(3),
                             image_width=w, image_height=h)


def random_rotation(rng):
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def matrix_projection(calib, p):
    """Independent 3x4 projection-matrix pipeline used as the oracle."""
    K = np.array([[calib.fx, 0.0, calib.cx],
                  [0.0, calib.fy, calib.cy],
                  [0.0, 0.0, 1.0]])
    P = K @ np.hstack([calib.rotation, calib.translation.reshape(3, 1)])
    hom = P @ np.append(np.asarray(p, dtype=np.float64), 1.0)
    return hom[0] / hom[2], hom[1] / hom[2]


class TestWrapAngle:
    def test_identity_in_range(self):
        assert wrap_angle(0.5) == 0.5

    def test_pi_maps_to_pi(self):
        assert wrap_angle(np.pi) == pytest.approx(np.pi)

    def test_minus_pi_maps_to_plus_pi(self):
        assert wrap_angle(-np.pi) == pytest.approx(np.pi)

    @given(st.floats(-100.0, 100.0))
    def test_always_in_half_open_interval(self, theta):
        w = wrap_angle(theta)
        assert -np.pi < w <= np.pi
        # wrapped value differs from the input by a whole number of turns
        assert abs((theta - w) / (2 * np.pi) - round((theta - w) / (2 * np.pi))) < 1e-9


class TestPose7:
    def test_angles_wrapped_and_gripper_clamped(self):
        p = Pose7(0, 0, 0, roll=4.0, pitch=-4.0, yaw=7.0, gripper=1.5)
        assert -np.pi < p.roll <= np.pi
        assert -np.pi < p.pitch <= np.pi
        assert -np.pi < p.yaw <= np.pi
        assert p.gripper == 1.0

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            Pose7(np.nan, 0, 0, 0, 0, 0, 0)

    def test_array_round_trip(self):
        p = Pose7(0.3, -0.1, 0.2, 0.1, -0.2, 0.3, 0.7)
        assert Pose7.from_array(p.as_array()) == p


class TestCameraCalibration:
    def test_rejects_non_orthonormal_rotation(self):
        with pytest.raises(ValueError):
            identity_calib().__class__(fx=1, fy=1, cx=0, cy=0,
                                       rotation=np.eye(3) * 2.0,
                                       translation=np.zeros(3),
                                       image_width=8, image_height=8)

    def test_rejects_reflection(self):
        r = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            CameraCalibration(fx=1, fy=1, cx=0, cy=0, rotation=r,
                              translation=np.zeros(3), image_width=8, image_height=8)

    def test_rejects_nonpositive_focal(self):
        with pytest.raises(ValueError):
            identity_calib(fx=0.0)

    def test_dict_round_trip(self, rng):
        calib = CameraCalibration(fx=180, fy=170, cx=64, cy=60,
                                  rotation=random_rotation(rng),
                                  translation=rng.standard_normal(3),
                                  image_width=128, image_height=96)
        back = CameraCalibration.from_dict(calib.to_dict())
        np.testing.assert_array_equal(back.rotation, calib.rotation)
        np.testing.assert_array_equal(back.translation, calib.translation)
        assert (back.fx, back.fy, back.cx, back.cy) == (180, 170, 64, 60)


class TestProjectPoint:
    def test_principal_ray(self):
        px = project_point(identity_calib(), (0, 0, 1))
        assert (px.u, px.v) == (0.0, 0.0)

    def test_hand_computed_case(self):
        px = project_point(identity_calib(fx=100, fy=100, cx=64, cy=64),
                           (0.1, 0.2, 1.0))
        assert px.u == pytest.approx(74.0, abs=1e-12)
        assert px.v == pytest.approx(84.0, abs=1e-12)

    def test_point_behind_camera(self):
        with pytest.raises(PointBehindCamera):
            project_point(identity_calib(), (0.1, 0.1, 0.0))

    def test_in_frame_flag(self):
        calib = identity_calib(fx=100, fy=100, cx=64, cy=64, w=128, h=128)
        assert project_point(calib, (0, 0, 1)).in_frame
        assert not project_point(calib, (10.0, 0, 1)).in_frame

    def test_matches_matrix_oracle_on_random_cases(self, rng):
        for _ in range(1000):
            calib = CameraCalibration(
                fx=float(rng.uniform(50, 500)), fy=float(rng.uniform(50, 500)),
                cx=float(rng.uniform(0, 128)), cy=float(rng.uniform(0, 128)),
                rotation=random_rotation(rng),
                translation=rng.uniform(-1, 1, 3),
                image_width=128, image_height=128)
            p = rng.uniform(-2, 2, 3)
            cam_z = (calib.rotation @ p + calib.translation)[2]
            if cam_z <= 1e-3:
                continue
            px = project_point(calib, p)
            u, v = matrix_projection(calib, p)
            assert abs(px.u - u) <= 1e-9 * max(1.0, abs(u))
            assert abs(px.v - v) <= 1e-9 * max(1.0, abs(v))


class TestPoseDelta:
    def test_identity(self):
        p = Pose7(0.4, 0.0, 0.1, 0.2, 0.1, -0.3, 0.8)
        d = pose_delta(p, p)
        np.testing.assert_allclose(d[:6], 0.0)
        assert d[6] == p.gripper

    def test_linear_z_difference(self):
        a = Pose7(0, 0, 0.10, 0, 0, 0, 0)
        b = Pose7(0, 0, 0.13, 0, 0, 0, 0)
        assert pose_delta(a, b)[2] == pytest.approx(0.03)

    def test_yaw_wraps_through_pi(self):
        a = Pose7(0, 0, 0, 0, 0, 3.1, 0)
        b = Pose7(0, 0, 0, 0, 0, -3.1, 0)
        assert pose_delta(a, b)[5] == pytest.approx(2 * np.pi - 6.2, abs=1e-9)

    @given(st.floats(-3.0, 3.0), st.floats(-3.0, 3.0))
    def test_rotation_deltas_always_wrapped(self, ya, yb):
        a = Pose7(0, 0, 0, ya, ya, ya, 0)
        b = Pose7(0, 0, 0, yb, yb, yb, 0)
        d = pose_delta(a, b)
        assert np.all(d[3:6] > -np.pi) and np.all(d[3:6] <= np.pi)


class TestDirectionWords:
    def test_forward_right(self):
        assert direction_words([0.02, -0.01, 0.0002, 0, 0, 0, 0], 0.005) == \
            ["forward", "right"]

    def test_backward_up(self):
        assert direction_words([-0.01, 0.0, 0.02, 0, 0, 0, 0], 0.005) == \
            ["backward", "up"]

    def test_all_below_deadband(self):
        assert direction_words([0, 0, 0, 0, 0, 0, 0], 0.005) == []

    def test_deadband_must_be_positive(self):
        with pytest.raises(ValueError):
            direction_words([0.01, 0, 0], 0.0)

    @settings(max_examples=200)
    @given(st.lists(st.floats(-0.05, 0.05), min_size=3, max_size=3))
    def test_no_antonym_pairs_and_deterministic_order(self, xyz):
        words = direction_words(xyz + [0, 0, 0, 0], 0.005)
        for a, b in (("forward", "backward"), ("left", "right"), ("up", "down")):
            assert not (a in words and b in words)
        order = ["forward", "backward", "left", "right", "up", "down"]
        ranks = [min(order.index(w) // 2 for w in [w2]) for w2 in words]
        assert ranks == sorted(ranks)


class TestBBox:
    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            BBox(5, 5, 5, 10)

    def test_tuple_view(self):
        assert BBox(1, 2, 3, 4).as_tuple() == (1, 2, 3, 4)


def test_pixel_is_plain_record():
    px = Pixel(1.5, 2.5, True)
    assert (px.u, px.v, px.in_frame) == (1.5, 2.5, True)
