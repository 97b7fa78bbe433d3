import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from thinspect.errors import NonPositiveDepth, ParseError
from thinspect.geometry import (PinholeCamera, Pose2D, RigidTransform, axis_angle_matrix, compose, invert,
                                load_transform, normalize_angle, project, random_transform, rot_z,
                                rotation_angle, rotation_vector, save_transform)

CAM = PinholeCamera(1733.0, 1024, 1024)

seeds = st.integers(0, 2**32 - 1)


def rand(seed):
    return random_transform(np.random.default_rng(seed), 0.5)


def test_compose_identity_left():
    t = rand(1)
    assert compose(RigidTransform.identity(), t).allclose(t)


def test_compose_with_inverse_is_identity():
    t = rand(2)
    assert compose(t, invert(t)).allclose(RigidTransform.identity())


def test_quarter_turns_compose_to_half_turn():
    q = RigidTransform(rot_z(math.pi / 2))
    assert np.allclose(compose(q, q).rotation, rot_z(math.pi), atol=1e-12)


def test_invert_identity():
    assert invert(RigidTransform.identity()).allclose(RigidTransform.identity())


def test_invert_translation():
    t = invert(RigidTransform.from_translation((1, 2, 3)))
    assert np.allclose(t.translation, (-1, -2, -3))
    assert np.allclose(t.rotation, np.eye(3))


def test_double_inverse_over_random_transforms():
    rng = np.random.default_rng(0)
    for _ in range(100):
        t = random_transform(rng)
        assert np.abs(invert(invert(t)).matrix() - t.matrix()).max() <= 1e-9


@settings(max_examples=50, deadline=None)
@given(seeds, seeds, seeds)
def test_associativity(a, b, c):
    A, B, C = rand(a), rand(b), rand(c)
    assert compose(compose(A, B), C).allclose(compose(A, compose(B, C)))


@settings(max_examples=50, deadline=None)
@given(seeds, seeds)
def test_compose_matches_scipy_oracle(a, b):
    A, B = rand(a), rand(b)
    ra, rb = Rotation.from_matrix(A.rotation), Rotation.from_matrix(B.rotation)
    R = (ra * rb).as_matrix()
    t = ra.apply(B.translation) + A.translation
    C = compose(A, B)
    assert np.allclose(C.rotation, R, atol=1e-12)
    assert np.allclose(C.translation, t, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3),
       st.floats(-math.pi, math.pi))
def test_axis_angle_matches_scipy(axis, angle):
    a = np.asarray(axis) / np.linalg.norm(axis)
    assert np.allclose(axis_angle_matrix(axis, angle), Rotation.from_rotvec(a * angle).as_matrix(), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_rotation_vector_matches_scipy(seed):
    R = rand(seed).rotation
    expected = Rotation.from_matrix(R).as_rotvec()
    assert np.allclose(rotation_vector(R), expected, atol=1e-7)
    assert math.isclose(rotation_angle(R), np.linalg.norm(expected), abs_tol=1e-7)


def test_rotation_vector_near_half_turn():
    R = axis_angle_matrix((1, 2, 2), math.pi)
    rv = rotation_vector(R)
    assert math.isclose(np.linalg.norm(rv), math.pi, abs_tol=1e-9)
    assert np.allclose(axis_angle_matrix(rv, np.linalg.norm(rv)), R, atol=1e-9)


def test_orthonormal_after_1000_compositions():
    rng = np.random.default_rng(5)
    t = RigidTransform.identity()
    for _ in range(1000):
        t = t @ random_transform(rng)
    R = t.rotation
    assert np.abs(R @ R.T - np.eye(3)).max() <= 1e-6
    assert abs(np.linalg.det(R) - 1.0) <= 1e-6


def test_rejects_improper_rotation():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3) * 2)


def test_apply_single_and_batch():
    t = rand(9)
    pts = np.random.default_rng(1).normal(size=(5, 3))
    batch = t.apply(pts)
    for p, q in zip(pts, batch):
        assert np.allclose(t.rotation @ p + t.translation, q)


def test_project_principal_point():
    assert np.allclose(project((0, 0, 0.15), CAM), (512, 512))


@pytest.mark.parametrize("span_mm, expected_px", [(0.9, 10.4), (1.2, 13.9), (1.1, 12.7)])
def test_project_hole_spans(span_mm, expected_px):
    # reported sizes 10, 14, 13 px for 0.9, 1.2, 1.1 mm holes at 0.15 m, f = 1733
    a = project((-span_mm / 2e3, 0, 0.15), CAM)
    b = project((span_mm / 2e3, 0, 0.15), CAM)
    assert abs((b - a)[0] - expected_px) <= 0.05
    assert abs(round((b - a)[0]) - round(expected_px)) == 0


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.05, 0.05), st.floats(-0.05, 0.05), st.floats(0.05, 1.0))
def test_projection_offset_halves_when_depth_doubles(x, y, z):
    c = CAM.principal_point
    near = project((x, y, z), CAM) - c
    far = project((x, y, 2 * z), CAM) - c
    assert np.allclose(far, near / 2, atol=1e-9)


def test_project_behind_camera():
    with pytest.raises(NonPositiveDepth):
        project((0, 0, -0.1), CAM)
    with pytest.raises(NonPositiveDepth):
        project((0, 0, 0.0), CAM)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1024), st.floats(0, 1024), st.floats(0.05, 1.0))
def test_backproject_round_trip(u, v, z):
    p = CAM.backproject((u, v), z)
    assert math.isclose(p[2], z)
    assert np.allclose(project(p, CAM), (u, v), atol=1e-9)


def test_camera_validation():
    with pytest.raises(ValueError):
        PinholeCamera(0.0, 10, 10)
    with pytest.raises(ValueError):
        PinholeCamera(100.0, 0, 10)


def test_scaled_camera_projects_consistently():
    p = np.array([0.01, -0.004, 0.15])
    assert np.allclose(CAM.scaled(2).project(p), 2 * CAM.project(p))


def test_camera_dict_round_trip():
    c = PinholeCamera(1000.0, 640, 480, 300.5, 250.25)
    assert PinholeCamera.from_dict(c.to_dict()) == c


@pytest.mark.parametrize("theta", [0.0, math.pi, -math.pi, 3 * math.pi, 7.0, -7.0])
def test_normalize_angle_range(theta):
    t = normalize_angle(theta)
    assert -math.pi < t <= math.pi
    assert math.isclose(math.cos(t), math.cos(theta), abs_tol=1e-12)
    assert math.isclose(math.sin(t), math.sin(theta), abs_tol=1e-12)


def test_pose2d_wraps_theta():
    assert math.isclose(Pose2D(0, 0, 2 * math.pi + 0.1).theta, 0.1)


def test_transform_file_round_trip(tmp_path):
    t = rand(4)
    save_transform(tmp_path / "t.json", t)
    assert load_transform(tmp_path / "t.json").allclose(t, 1e-12)


def test_transform_file_errors(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ParseError):
        load_transform(tmp_path / "bad.json")
    (tmp_path / "shape.json").write_text(json.dumps({"matrix": [[1, 0], [0, 1]]}))
    with pytest.raises(ParseError):
        load_transform(tmp_path / "shape.json")
