"""Projection, rigid transforms, coordinate conversions, and scale statistics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudtrack.errors import (
    ConfigError,
    DegenerateProjectionError,
    DegenerateScaleError,
    InvalidDepthError,
    ShapeError,
)
from cloudtrack.geometry import (
    CameraIntrinsics,
    CoordinateSystem,
    RigidMagnitude,
    RigidTransform,
    axis_angle_to_matrix,
    compute_scale_factor,
    convert_coords,
    matrix_to_axis_angle,
    project,
    random_rigid_sequence,
    rotation_angle,
    to_camera,
    to_world,
    unproject,
)

INTR = CameraIntrinsics(fx=100.0, fy=120.0, cx=32.0, cy=24.0, width=64, height=48)


def random_cam_points(rng, n, depth_range=(0.5, 10.0)):
    pts = rng.normal(size=(n, 3))
    pts[:, 2] = rng.uniform(*depth_range, size=n)
    return pts


def random_pose(rng, scale=1.0):
    axis_angle = rng.normal(size=3)
    axis_angle *= rng.uniform(0, np.pi * 0.9) / max(np.linalg.norm(axis_angle), 1e-12)
    return RigidTransform.from_axis_angle(axis_angle, rng.normal(size=3) * scale)


# --- intrinsics and validation ----------------------------------------------


def test_intrinsics_reject_bad_values():
    with pytest.raises(ConfigError):
        CameraIntrinsics(fx=0.0, fy=1.0, cx=0.0, cy=0.0, width=4, height=4)
    with pytest.raises(ConfigError):
        CameraIntrinsics(fx=1.0, fy=1.0, cx=5.0, cy=0.0, width=4, height=4)


def test_intrinsics_round_trip_dict():
    d = INTR.to_dict()
    assert CameraIntrinsics.from_dict(d) == INTR


# --- project / unproject ------------------------------------------------------


def test_project_unproject_identity(rng):
    pts = random_cam_points(rng, 2000)
    uv = project(pts, INTR)
    back = unproject(uv, pts[:, 2], INTR)
    np.testing.assert_allclose(back, pts, atol=1e-9)


def test_project_scalar_formula():
    uv = project(np.array([[0.5, -0.25, 2.0]]), INTR)
    assert uv[0, 0] == pytest.approx(100.0 * 0.5 / 2.0 + 32.0)
    assert uv[0, 1] == pytest.approx(120.0 * -0.25 / 2.0 + 24.0)


def test_project_zero_depth_raises():
    with pytest.raises(DegenerateProjectionError):
        project(np.array([[1.0, 1.0, 0.0]]), INTR)


def test_project_flags_points_behind_camera():
    uv, behind = project(np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 1.0]]), INTR,
                         return_behind=True)
    assert behind.tolist() == [True, False]


def test_unproject_rejects_nonpositive_depth():
    with pytest.raises(InvalidDepthError):
        unproject(np.array([[1.0, 1.0]]), np.array([0.0]), INTR)
    with pytest.raises(InvalidDepthError):
        unproject(np.array([[1.0, 1.0]]), np.array([np.nan]), INTR)


# --- rigid transforms ---------------------------------------------------------


def test_rigid_inverse_and_compose(rng):
    for _ in range(20):
        a, b = random_pose(rng), random_pose(rng)
        pts = rng.normal(size=(50, 3))
        np.testing.assert_allclose(a.inverse().apply(a.apply(pts)), pts, atol=1e-10)
        # compose applies the right-hand transform first
        np.testing.assert_allclose(
            a.compose(b).apply(pts), a.apply(b.apply(pts)), atol=1e-10
        )


def test_rigid_rotation_is_orthonormal(rng):
    for _ in range(20):
        r = random_pose(rng).rotation
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-10)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-10)


def test_rigid_flat12_round_trip(rng):
    t = random_pose(rng)
    back = RigidTransform.from_flat12(t.as_flat12())
    np.testing.assert_allclose(back.rotation, t.rotation, atol=1e-12)
    np.testing.assert_allclose(back.translation, t.translation, atol=1e-12)


def test_axis_angle_round_trip(rng):
    for _ in range(50):
        aa = rng.normal(size=3)
        aa *= rng.uniform(0.0, np.pi * 0.95) / max(np.linalg.norm(aa), 1e-12)
        back = matrix_to_axis_angle(axis_angle_to_matrix(aa))
        np.testing.assert_allclose(back, aa, atol=1e-8)


def test_rotation_angle_matches_axis_angle_norm(rng):
    aa = np.array([0.0, 0.3, 0.0])
    assert rotation_angle(axis_angle_to_matrix(aa)) == pytest.approx(0.3, abs=1e-12)


def test_world_camera_round_trip(rng):
    pose = random_pose(rng)
    pts = rng.normal(size=(100, 3))
    np.testing.assert_allclose(to_camera(to_world(pts, pose), pose), pts, atol=1e-10)


# --- coordinate conversions ---------------------------------------------------

ALL_SYSTEMS = [
    CoordinateSystem.UVD,
    CoordinateSystem.UV_LOGD,
    CoordinateSystem.XYZ_CAMERA,
    CoordinateSystem.XYZ_WORLD,
]


@pytest.mark.parametrize("src", ALL_SYSTEMS)
@pytest.mark.parametrize("dst", ALL_SYSTEMS)
def test_convert_coords_round_trip(src, dst, rng):
    pose = random_pose(rng)
    cam = random_cam_points(rng, 200)
    pts = convert_coords(cam, CoordinateSystem.XYZ_CAMERA, src, INTR, pose=pose)
    there = convert_coords(pts, src, dst, INTR, pose=pose)
    back = convert_coords(there, dst, src, INTR, pose=pose)
    np.testing.assert_allclose(back, pts, atol=1e-8)


def test_convert_coords_world_requires_pose():
    with pytest.raises(ConfigError):
        convert_coords(
            np.zeros((1, 3)), CoordinateSystem.XYZ_WORLD,
            CoordinateSystem.XYZ_CAMERA, INTR,
        )


def test_convert_coords_same_system_copies():
    pts = np.ones((4, 3))
    out = convert_coords(pts, CoordinateSystem.XYZ_CAMERA,
                         CoordinateSystem.XYZ_CAMERA, INTR)
    assert out is not pts
    np.testing.assert_array_equal(out, pts)


def test_convert_coords_rejects_behind_camera_for_pixel_systems():
    pts = np.array([[0.0, 0.0, -2.0]])
    with pytest.raises(InvalidDepthError):
        convert_coords(pts, CoordinateSystem.XYZ_CAMERA, CoordinateSystem.UVD, INTR)


def test_uvd_depth_channel_is_passthrough(rng):
    cam = random_cam_points(rng, 50)
    uvd = convert_coords(cam, CoordinateSystem.XYZ_CAMERA, CoordinateSystem.UVD, INTR)
    np.testing.assert_allclose(uvd[:, 2], cam[:, 2], atol=1e-12)
    logd = convert_coords(cam, CoordinateSystem.XYZ_CAMERA,
                          CoordinateSystem.UV_LOGD, INTR)
    np.testing.assert_allclose(logd[:, 2], np.log(cam[:, 2]), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    x=st.floats(-5, 5), y=st.floats(-5, 5),
    z=st.floats(0.1, 50, exclude_min=True),
)
def test_projection_round_trip_property(x, y, z):
    pt = np.array([[x, y, z]])
    back = unproject(project(pt, INTR), pt[:, 2], INTR)
    np.testing.assert_allclose(back, pt, rtol=1e-9, atol=1e-9)


# --- scale statistic ----------------------------------------------------------


def test_scale_factor_is_population_std(rng):
    pts = rng.normal(size=(500, 3)) * 2.5
    sf = compute_scale_factor(pts)
    assert sf.sigma == pytest.approx(float(np.std(pts.reshape(-1))), rel=1e-12)


def test_scale_factor_depth_bound_filters_statistic_only(rng):
    near = rng.normal(size=(300, 3)) + [0, 0, 3.0]
    far = rng.normal(size=(300, 3)) + [0, 0, 50.0]
    pts = np.concatenate([near, far])
    bounded = compute_scale_factor(pts, depth_upper_bound=10.0)
    # the bound excludes the far half from the statistic
    assert bounded.sigma == pytest.approx(
        float(np.std(pts[pts[:, 2] <= 10.0].reshape(-1))), rel=1e-12
    )
    assert bounded.sigma != pytest.approx(float(np.std(pts.reshape(-1))), rel=1e-3)


def test_scale_factor_degenerate_cases():
    with pytest.raises(DegenerateScaleError):
        compute_scale_factor(np.zeros((1, 3)))
    with pytest.raises(DegenerateScaleError):
        compute_scale_factor(np.ones((10, 3)))
    with pytest.raises(DegenerateScaleError):
        compute_scale_factor(np.random.default_rng(0).normal(size=(10, 3)) + [0, 0, 100],
                             depth_upper_bound=1.0)


def test_scale_round_trip(rng):
    sf = compute_scale_factor(rng.normal(size=(100, 3)))
    pts = rng.normal(size=(20, 3))
    np.testing.assert_allclose(sf.unscale(sf.scale(pts)), pts, atol=1e-12)


# --- random rigid sequences ----------------------------------------------------


def test_random_rigid_sequence_deterministic():
    mag = RigidMagnitude(max_rotation=0.3, max_translation=0.5)
    a = random_rigid_sequence(16, mag, seed=3)
    b = random_rigid_sequence(16, mag, seed=3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.rotation, y.rotation)
        np.testing.assert_array_equal(x.translation, y.translation)


def test_random_rigid_sequence_respects_magnitudes():
    mag = RigidMagnitude(max_rotation=0.2, max_translation=0.4)
    seq = random_rigid_sequence(32, mag, seed=5)
    assert len(seq) == 32
    for t in seq:
        assert rotation_angle(t.rotation) <= 0.2 + 1e-9
        assert np.all(np.abs(t.translation) <= 0.4 + 1e-9)


def test_zero_magnitude_sequence_is_identity():
    for t in random_rigid_sequence(8, RigidMagnitude(), seed=1):
        np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(t.translation, 0.0, atol=1e-12)
