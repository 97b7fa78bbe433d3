import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thinspect import match as match_mod, synth
from thinspect.errors import ArtifactError, NoMatch, OutOfBounds, SizeMismatch
from thinspect.geometry import PinholeCamera, Pose2D, RigidTransform, project, rotation_angle, rotation_vector
from thinspect.match import (ImageGradients, generate_templates, lift_to_3d, load_templates, match, overlay,
                             refine, save_templates, similarity)
from thinspect.model import GraspSpec
from thinspect.render import rasterize

MM = 1e-3
CAM = PinholeCamera(1733.0, 1024, 1024)
FRONTAL = np.diag([1.0, -1.0, -1.0])


def plate_setup(fingers=None, config=None):
    """10 mm square plate facing the camera, gripped so that in-hand rotation turns it in the image plane."""
    plate = synth.grid_box((-5 * MM, -5 * MM, -1 * MM), (5 * MM, 5 * MM, 0), 0.5 * MM)
    boxes = fingers or [((30 * MM, 30 * MM, -1 * MM), (40 * MM, 40 * MM, 1 * MM))]
    grasp = GraspSpec(RigidTransform.from_translation((0, 0, -0.5 * MM)), boxes, (0, 0, 1))
    cam_T_obj = RigidTransform(FRONTAL, (0, 0, 0.15))
    cam_T_tcp = cam_T_obj @ grasp.tcp_in_object
    ts = generate_templates(plate, grasp, cam_T_tcp, CAM, config)
    return plate, grasp, ts


@pytest.fixture(scope="module")
def plate():
    return plate_setup()


def plate_image(mesh, pose):
    buf = rasterize(mesh, [], pose, CAM, supersample=2)
    return np.clip(np.rint(buf.intensity), 0, 255).astype(np.uint8)


def test_square_edges_on_four_lines(plate):
    _, _, ts = plate
    t = ts.templates[0][len(ts.thetas[0]) // 2]
    assert t.theta == 0.0
    c = t.pixels + 0.5
    half = 5 * MM * 1733 / 0.15
    lo, hi = ts.cam.cx - half, ts.cam.cx + half
    # each point is within a pixel of one of the four sides
    d = np.min(np.abs(np.stack([c[:, 0] - lo, c[:, 0] - hi, c[:, 1] - lo, c[:, 1] - hi])), axis=0)
    assert d.max() <= 1.0
    # directions are axis aligned away from the corners
    away = np.min(np.abs(np.stack([c[:, 0] - lo, c[:, 0] - hi])), axis=0) > 3
    away &= np.min(np.abs(np.stack([c[:, 1] - lo, c[:, 1] - hi])), axis=0) > 3
    ang = np.degrees(np.arctan2(np.abs(t.directions[away, 1]), np.abs(t.directions[away, 0])))
    assert np.all(np.minimum(ang, 90 - ang) <= 2.0)


def segment_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0, 1)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


@pytest.mark.parametrize("deg", [10.0, -10.0])
def test_rotated_template_is_rotated_square(plate, deg):
    _, _, ts = plate
    th = ts.thetas[0]
    t = ts.templates[0][int(np.argmin(np.abs(th - math.radians(deg))))]
    assert math.isclose(t.theta, math.radians(deg), abs_tol=1e-9)
    # image rotation sense follows the grasp normal as seen by the camera
    a = t.theta * np.sign(ts.normal_cam[2])
    R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    half = 5 * MM * 1733 / 0.15
    corners = np.array([[-half, -half], [half, -half], [half, half], [-half, half]]) @ R.T + t.anchor
    c = t.pixels + 0.5
    d = np.min([segment_distance(c, corners[i], corners[(i + 1) % 4]) for i in range(4)], axis=0)
    assert math.sqrt(np.mean(d ** 2)) <= 1.0
    assert d.max() <= 1.5


def test_finger_mask_excludes_edges():
    # finger covering the lower third of the plate (object -Y, image bottom with this pose)
    finger = [((-8 * MM, -8 * MM, -2 * MM), (8 * MM, -5 * MM + 10 * MM / 3, 2 * MM))]
    _, _, ts_f = plate_setup(finger)
    _, _, ts_free = plate_setup()
    mask = ts_f.finger_mask
    for lvl_templates in ts_f.templates[:1]:
        for t in lvl_templates:
            assert not mask[t.pixels[:, 1], t.pixels[:, 0]].any()
    t_free = ts_free.templates[0][len(ts_free.thetas[0]) // 2]
    assert mask[t_free.pixels[:, 1], t_free.pixels[:, 0]].sum() > 50
    t = ts_f.templates[0][len(ts_f.thetas[0]) // 2]
    bottom = CAM.cy + (5 * MM - 10 * MM / 3) * 1733 / 0.15
    assert np.all(t.pixels[:, 1] + 0.5 < bottom)


def test_self_match_similarity(plate):
    mesh, _, ts = plate
    k = len(ts.thetas[0]) // 2
    img = plate_image(mesh, ts.object_pose(0.0))
    g = ImageGradients.build(img, 1, ts.g_min)
    assert similarity((g.gx[0], g.gy[0]), ts.templates[0][k], ts.templates[0][k].anchor) >= 0.98


def test_uniform_image_scores_zero(plate):
    _, _, ts = plate
    g = ImageGradients.build(np.full((1024, 1024), 128, np.uint8), 1)
    t = ts.templates[0][0]
    assert similarity((g.gx[0], g.gy[0]), t, t.anchor) == 0.0


def test_similarity_out_of_bounds(plate):
    _, _, ts = plate
    g = ImageGradients.build(np.zeros((1024, 1024)), 1)
    with pytest.raises(OutOfBounds):
        similarity((g.gx[0], g.gy[0]), ts.templates[0][0], (5.0, 5.0))


TRANSFORMS = [
    lambda im: 255.0 - im,          # inverted contrast
    lambda im: im + 17.0,           # additive shift
    lambda im: im * 3.5,            # positive gain
    lambda im: (im - 100.0) * 1.7,  # both
]


@pytest.fixture(scope="module")
def header_view(header, header_art):
    ts = header_art.templates
    tr = synth.slip_truth(header.grasp, header_art.cam_T_tcp, 1 * MM, -1 * MM, math.radians(5))
    img, _ = synth.render_scene(header, tr, CAM)
    t = ts.templates[0][int(np.argmin(np.abs(ts.thetas[0] - math.radians(5))))]
    return img.astype(np.float64), t, project(tr.cam_T_obj.translation, CAM), ts.g_min


@pytest.mark.parametrize("transform", TRANSFORMS)
def test_similarity_invariances_exact(header_view, transform):
    base, t, pos, _ = header_view
    g1 = ImageGradients.build(base, 1, 0.0)
    g2 = ImageGradients.build(transform(base), 1, 0.0)
    s1 = similarity((g1.gx[0], g1.gy[0]), t, pos)
    assert s1 > 0.8
    # gradients are single precision
    assert abs(s1 - similarity((g2.gx[0], g2.gy[0]), t, pos)) <= 1e-6


@pytest.mark.parametrize("transform", TRANSFORMS)
def test_similarity_invariances_with_gradient_floor(header_view, transform):
    # antialiased edge tails near g_min can switch state under gain
    base, t, pos, g_min = header_view
    g1 = ImageGradients.build(base, 1, g_min)
    g2 = ImageGradients.build(transform(base), 1, g_min)
    assert abs(similarity((g1.gx[0], g1.gy[0]), t, pos) - similarity((g2.gx[0], g2.gy[0]), t, pos)) <= 0.01


def pose_errors(est, truth):
    dt = np.linalg.norm(est.translation - truth.translation)
    da = math.degrees(rotation_angle(est.rotation.T @ truth.rotation))
    return dt, da


@pytest.mark.parametrize("offset", [(2.5, 2.5, 10.0), (-2.5, 2.5, -10.0), (0.0, 0.0, 0.0)])
def test_match_recovers_known_offset(header, header_art, offset):
    dx, dy, th = offset
    tr = synth.slip_truth(header.grasp, header_art.cam_T_tcp, dx * MM, dy * MM, math.radians(th))
    img, _ = synth.render_scene(header, tr, CAM)
    r = match(img, header_art.templates)
    dt, da = pose_errors(r.cam_T_obj, tr.cam_T_obj)
    assert dt <= 0.1 * MM and da <= 0.25
    if offset == (0.0, 0.0, 0.0):
        assert dt <= 0.05 * MM and da <= 0.1


@pytest.mark.parametrize("depth_error_mm", [-2.0, 2.0])
def test_match_with_noise_and_depth_error(header, header_art, depth_error_mm):
    ts = header_art.templates
    tr = synth.slip_truth(header.grasp, header_art.cam_T_tcp, 2.5 * MM, 2.5 * MM, math.radians(10),
                          noise_sigma=5, seed=8)
    # the real part sits off the assumed grasp plane along the view ray
    moved = RigidTransform.from_translation((0, 0, depth_error_mm * MM)) @ tr.cam_T_obj
    tr = synth.SceneTruth(tr.cam_T_tcp, moved, tr.offset, noise_sigma=5, seed=8)
    img, _ = synth.render_scene(header, tr, CAM)
    r = match(img, ts)
    lateral = np.linalg.norm((r.cam_T_obj.translation - moved.translation)[:2])
    assert lateral <= 1.0 * MM


def test_blank_image_no_match(header_art):
    with pytest.raises(NoMatch):
        match(np.full((1024, 1024), 230, np.uint8), header_art.templates)


def test_wrong_image_size(header_art):
    with pytest.raises(SizeMismatch):
        match(np.zeros((100, 100), np.uint8), header_art.templates)


@pytest.mark.parametrize("shift_px", [0.5, -0.5, 1.5])
def test_subpixel_shift_recovered(plate, shift_px):
    mesh, _, ts = plate
    pose = RigidTransform.from_translation((shift_px * 0.15 / 1733, 0, 0)) @ ts.object_pose(0.0)
    r = match(plate_image(mesh, pose), ts)
    expected = project(pose.translation, CAM)
    assert abs(r.pose2d.x - expected[0]) <= 0.15
    assert abs(r.pose2d.y - expected[1]) <= 0.15


def bowl(ts, k0, sx0, sy0, du=0.0, dv=0.0, dw=0.0):
    """Concave score surface over (origin, angle) with its vertex at a chosen sub-sample point."""
    tl = ts.templates[0]
    step = tl[1].theta - tl[0].theta
    peak = tl[k0].anchor + (sx0 + du, sy0 + dv)
    theta = tl[k0].theta + dw * step

    def score(grads, t, sx, sy):
        u, v = t.anchor + (sx, sy) - peak
        return 1.0 - 0.01 * (u * u + 2 * v * v + ((t.theta - theta) / step) ** 2) + 0.002 * u * v
    return score, Pose2D(float(peak[0]), float(peak[1]), theta)


def test_refine_symmetric_peak_unchanged(plate, monkeypatch):
    _, _, ts = plate
    k = len(ts.thetas[0]) // 2
    score, expected = bowl(ts, k, 4, -3)
    monkeypatch.setattr(match_mod, "shift_score", score)
    pose, refined = refine(None, ts, (k, 4, -3, 1.0))
    assert refined
    assert abs(pose.x - expected.x) <= 1e-9 and abs(pose.y - expected.y) <= 1e-9
    assert abs(pose.theta - expected.theta) <= 1e-12


@pytest.mark.parametrize("du,dv,dw", [(0.3, -0.2, 0.25), (-0.45, 0.1, -0.4)])
def test_refine_recovers_quadratic_vertex(plate, monkeypatch, du, dv, dw):
    _, _, ts = plate
    k = len(ts.thetas[0]) // 2
    score, expected = bowl(ts, k, 0, 0, du, dv, dw)
    monkeypatch.setattr(match_mod, "shift_score", score)
    pose, _ = refine(None, ts, (k, 0, 0, score(None, ts.templates[0][k], 0, 0)))
    assert abs(pose.x - expected.x) <= 1e-6 and abs(pose.y - expected.y) <= 1e-6
    assert abs(pose.theta - expected.theta) <= 1e-9


def test_nominal_scene_refines_near_anchor(plate):
    mesh, _, ts = plate
    r = match(plate_image(mesh, ts.object_pose(0.0)), ts)
    t = ts.templates[0][len(ts.thetas[0]) // 2]
    # subsampled edge points are not exactly symmetric about the anchor
    assert abs(r.pose2d.x - t.anchor[0]) <= 0.1 and abs(r.pose2d.y - t.anchor[1]) <= 0.1
    assert abs(math.degrees(r.pose2d.theta)) <= 0.05
    assert r.score >= r.level_scores[-1] - 1e-6


def test_refine_flat_surface_returns_discrete(plate):
    _, _, ts = plate
    g = ImageGradients.build(np.zeros((1024, 1024)), ts.levels, ts.g_min)
    k = len(ts.thetas[0]) // 2
    pose, _ = refine(g, ts, (k, 3, -2, 0.0))
    t = ts.templates[0][k]
    assert math.isclose(pose.x, t.anchor[0] + 3, abs_tol=1e-9)
    assert math.isclose(pose.y, t.anchor[1] - 2, abs_tol=1e-9)
    assert math.isclose(pose.theta, t.theta, abs_tol=1e-12)


def test_lift_principal_point(plate):
    _, _, ts = plate
    p = lift_to_3d(Pose2D(CAM.cx, CAM.cy, 0.0), ts)
    assert np.allclose(p.translation, (0, 0, ts.grasp_plane_depth), atol=1e-15)
    assert np.allclose(p.rotation, ts.cam_T_obj_nominal.rotation)


def test_lift_closed_form_offset(plate):
    _, _, ts = plate
    assert math.isclose(ts.grasp_plane_depth, 0.15, abs_tol=1e-12)
    p = lift_to_3d(Pose2D(CAM.cx + 115.5, CAM.cy, 0.0), ts)
    assert abs(p.translation[0] - 10.0 * MM) <= 0.01 * MM


@settings(max_examples=50, deadline=None)
@given(st.floats(100, 900), st.floats(100, 900), st.floats(-0.3, 0.3))
def test_lift_project_round_trip(header_art, x, y, th):
    ts = header_art.templates
    p = lift_to_3d(Pose2D(x, y, th), ts)
    assert np.allclose(project(p.translation, CAM), (x, y), atol=1e-6)
    # three degrees of freedom only: depth fixed, rotation about the grasp normal
    assert p.translation[2] == ts.grasp_plane_depth
    rel = p.rotation @ ts.cam_T_obj_nominal.rotation.T
    rv = rotation_vector(rel)
    assert np.linalg.norm(np.cross(rv, ts.normal_cam)) <= 1e-9


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_match_is_three_dof(header, header_art, seed):
    rng = np.random.default_rng(seed)
    dx, dy = rng.uniform(-2, 2, 2) * MM
    tr = synth.slip_truth(header.grasp, header_art.cam_T_tcp, dx, dy, rng.uniform(-0.2, 0.2), noise_sigma=5,
                          seed=seed)
    img, _ = synth.render_scene(header, tr, CAM)
    ts = header_art.templates
    r = match(img, ts)
    assert r.cam_T_obj.translation[2] == ts.grasp_plane_depth
    rv = rotation_vector(r.cam_T_obj.rotation @ ts.cam_T_obj_nominal.rotation.T)
    assert np.linalg.norm(np.cross(rv, ts.normal_cam)) <= 1e-9


def test_finger_region_noise_does_not_change_score(header, header_art):
    ts = header_art.templates
    tr = synth.slip_truth(header.grasp, header_art.cam_T_tcp, 1 * MM, 1 * MM, 0.1)
    img, _ = synth.render_scene(header, tr, CAM)
    noisy = img.copy()
    m = ts.finger_mask
    noisy[m] = np.random.default_rng(0).integers(0, 256, m.sum())
    assert abs(match(img, ts).score - match(noisy, ts).score) < 0.01


def test_fingers_do_not_change_score(header, header_art):
    ts = header_art.templates
    with_f = synth.slip_truth(header.grasp, header_art.cam_T_tcp, 1 * MM, -1 * MM, 0.05)
    without = synth.SceneTruth(with_f.cam_T_tcp, with_f.cam_T_obj, with_f.offset, fingers=False)
    a, _ = synth.render_scene(header, with_f, CAM)
    b, _ = synth.render_scene(header, without, CAM)
    assert abs(match(a, ts).score - match(b, ts).score) <= 0.01


def test_pyramid_shallower_for_small_parts(artifacts):
    assert artifacts["header_grid"].templates.levels == 4
    assert artifacts["led_like"].templates.levels < 4


def test_template_persistence(tmp_path, plate):
    _, _, ts = plate
    save_templates(tmp_path / "t.npz", ts)
    back = load_templates(tmp_path / "t.npz")
    assert back.levels == ts.levels
    assert np.array_equal(back.finger_mask, ts.finger_mask)
    for a_l, b_l in zip(ts.templates, back.templates):
        for a, b in zip(a_l, b_l):
            assert np.array_equal(a.pixels, b.pixels) and np.allclose(a.directions, b.directions)
            assert np.allclose(a.anchor, b.anchor) and a.theta == b.theta
    assert back.cam_T_tcp.allclose(ts.cam_T_tcp)
    (tmp_path / "bad.npz").write_bytes(b"not a zip")
    with pytest.raises(ArtifactError):
        load_templates(tmp_path / "bad.npz")


def test_overlay_draws_template(plate):
    mesh, _, ts = plate
    img = plate_image(mesh, ts.object_pose(0.0))
    out = overlay(img, ts, match(img, ts))
    assert out.shape == (1024, 1024, 3)
    assert ((out[..., 1] == 200) & (out[..., 0] == 0)).sum() > 100
