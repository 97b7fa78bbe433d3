import math
from collections import Counter

import cv2
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from thinspect import synth
from thinspect.errors import BehindCamera, InvalidSpec, UnknownPin
from thinspect.geometry import PinholeCamera, RigidTransform, project
from thinspect.pinseg import PIN
from thinspect.render import FINGER_ID

MM = 1e-3
CAM = PinholeCamera(1733.0, 1024, 1024)


def test_header_3x3_has_nine_pins():
    spec = synth.default_spec("header_grid", rows=3, cols=3, row_spacing=2.54 * MM, body=(8 * MM, 8 * MM, 2.5 * MM))
    mesh, labels, pins = synth.generate_component(spec)
    assert len(pins) == 9
    assert len(labels) == len(mesh.vertices)


@pytest.mark.parametrize("family,n_pins,n_instances", [("header_grid", 9, 9), ("dsub_like", 9, 11),
                                                       ("led_like", 2, 2)])
def test_default_family_counts(components, family, n_pins, n_instances):
    c = components[family]
    assert c.n_contact_pins == n_pins and len(c.insertion_pins) == n_pins
    assert len(c.instances) == n_instances


@pytest.mark.parametrize("family", synth.FAMILIES)
def test_pin_fraction_in_dataset_range(components, family):
    labels = components[family].labels
    assert 0.1 <= np.mean(labels == PIN) <= 0.4


@pytest.mark.parametrize("family", synth.FAMILIES)
def test_mesh_closed(components, family):
    t = components[family].mesh.triangles
    edges = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    counts = Counter(map(tuple, edges))
    assert set(counts.values()) == {2}


@pytest.mark.parametrize("family", synth.FAMILIES)
def test_instances_exact(components, family):
    c = components[family]
    for p in c.instances:
        ids = p.vertex_array()
        assert np.all(c.labels[ids] == PIN)
        length = c.spec.pin_length if p.id <= c.n_contact_pins else c.spec.stud_length
        assert np.allclose(p.tip_point - p.base_point, length * p.axis, atol=1e-15)
        d = c.mesh.vertices[ids] - p.base_point
        along = d @ p.axis
        assert along.min() >= -1e-12 and along.max() <= length + 1e-12
    every = np.concatenate([p.vertex_array() for p in c.instances])
    assert len(every) == len(set(every.tolist())) == int((c.labels == PIN).sum())


@pytest.mark.parametrize("field,value", [("pitch", 0.5 * MM), ("pin_length", 0.0), ("hole_diameter", 0.3 * MM),
                                         ("pin_shape", "hex"), ("rows", -1)])
def test_invalid_spec(field, value):
    with pytest.raises(InvalidSpec):
        synth.default_spec("header_grid", **{field: value})


def test_unknown_family_and_field():
    with pytest.raises(InvalidSpec):
        synth.default_spec("qfp")
    with pytest.raises(InvalidSpec):
        synth.default_spec("header_grid", colour="red")


def test_spec_round_trip():
    spec = synth.default_spec("dsub_like")
    assert synth.ComponentSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(InvalidSpec):
        synth.ComponentSpec.from_dict({"bogus": 1})


@pytest.mark.parametrize("family", synth.FAMILIES)
def test_generation_deterministic(family):
    a = synth.build_component(synth.default_spec(family))
    b = synth.build_component(synth.default_spec(family))
    assert np.array_equal(a.mesh.vertices, b.mesh.vertices) and np.array_equal(a.labels, b.labels)


# ------------------------------------------------------------------ bending



def test_bend_zero_is_bitwise_copy(header):
    m = synth.bend_pin(header.mesh, header.instances, 3, 0.0, 1.0)
    assert m.vertices.tobytes() == header.mesh.vertices.tobytes()
    assert m.vertices is not header.mesh.vertices


def test_bend_tip_deflection_closed_form():
    spec = synth.default_spec("header_grid", pin_length=5 * MM)
    c = synth.build_component(spec)
    pin = c.instances[0]
    bent = synth.bent_instance(pin, math.radians(15), 0.3)
    d = bent.tip_point - pin.tip_point
    lateral = np.linalg.norm(d - (d @ pin.axis) * pin.axis)
    assert abs(lateral - 5 * MM * math.sin(math.radians(15))) <= 1e-12
    assert abs(lateral - 1.294 * MM) <= 0.001 * MM


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.floats(0.0, math.radians(45)), st.floats(-math.pi, math.pi))
def test_bend_rotation_oracle(header, pin_id, angle, azimuth):
    pin = header.instances[pin_id - 1]
    m = synth.bend_pin(header.mesh, header.instances, pin_id, angle, azimuth)
    assert len(m.vertices) == len(header.mesh.vertices)
    assert np.array_equal(m.triangles, header.mesh.triangles)
    ids = pin.vertex_array()
    others = np.setdiff1d(np.arange(len(m.vertices)), ids)
    assert np.array_equal(m.vertices[others], header.mesh.vertices[others])
    # independent rotation: axis perpendicular to both pin axis and bend direction
    d = synth.bend_direction(pin, azimuth)
    rot = Rotation.from_rotvec(np.cross(pin.axis, d) * angle)
    expected = rot.apply(header.mesh.vertices[ids] - pin.base_point) + pin.base_point
    assert np.allclose(m.vertices[ids], expected, atol=1e-12)
    # the tip moves toward the requested azimuth
    if angle > 1e-3:
        tip_shift = rot.apply(pin.tip_point - pin.base_point) - (pin.tip_point - pin.base_point)
        assert tip_shift @ d > 0


@settings(max_examples=50)
@given(st.floats(-3.0, 3.0))
def test_azimuth_round_trip(header, az):
    pin = header.instances[0]
    got = synth.azimuth_of(pin, synth.bend_direction(pin, az))
    assert abs(math.remainder(got - az, 2 * math.pi)) <= 1e-9


def test_bend_errors(header):
    with pytest.raises(UnknownPin):
        synth.bend_pin(header.mesh, header.instances, 99, 0.1, 0.0)
    with pytest.raises(ValueError):
        synth.bend_pin(header.mesh, header.instances, 1, math.radians(50), 0.0)
    with pytest.raises(ValueError):
        synth.bend_pin(header.mesh, header.instances, 1, -0.1, 0.0)


# ------------------------------------------------------------------ scenes


def test_scene_offset_limit(header, header_art):
    with pytest.raises(ValueError):
        synth.slip_truth(header.grasp, header_art.cam_T_tcp, 0, 0, math.radians(25))


def test_scene_truth_round_trip(header, header_art):
    tr = synth.slip_truth(header.grasp, header_art.cam_T_tcp, 1 * MM, 2 * MM, 0.1, noise_sigma=5, seed=3,
                          bent=[(2, 0.2, 0.5)])
    back = synth.SceneTruth.from_dict(tr.to_dict())
    assert back.cam_T_obj.allclose(tr.cam_T_obj, 1e-15) and back.bent == tr.bent
    assert back.offset == tr.offset and back.seed == 3 and back.noise_sigma == 5


def test_slip_and_motion_agree_at_zero(header, header_art):
    a = synth.slip_truth(header.grasp, header_art.cam_T_tcp)
    b = synth.motion_truth(header.grasp, header_art.cam_T_tcp)
    assert a.cam_T_obj.allclose(b.cam_T_obj, 1e-12)


def test_motion_keeps_part_in_hand(header, header_art):
    tr = synth.motion_truth(header.grasp, header_art.cam_T_tcp, 2 * MM, -1 * MM, 0.1)
    assert (tr.cam_T_tcp.inverse() @ tr.cam_T_obj).allclose(header.grasp.tcp_T_obj, 1e-12)


@pytest.fixture(scope="module")
def noiseless(header, header_art):
    tr = synth.slip_truth(header.grasp, header_art.cam_T_tcp, 1 * MM, -1 * MM, 0.05)
    return tr, synth.render_scene(header, tr, CAM)


@pytest.mark.parametrize("family", synth.FAMILIES)
def test_true_tips_inside_silhouettes(components, artifacts, family):
    c, art = components[family], artifacts[family]
    tr = synth.slip_truth(c.grasp, art.cam_T_tcp, 1 * MM, 1 * MM, math.radians(5))
    _, buf = synth.render_scene(c, tr, CAM)
    for p in c.insertion_pins:
        # the id buffer is sampled at pixel centers; step just over one pixel inside the tip face
        inner = p.tip_point - 0.1 * MM * p.axis
        x, y = project(tr.cam_T_obj.apply(inner), CAM)
        assert buf.instance_id[int(y), int(x)] == p.id + 1


def test_true_tips_inside_bent_silhouettes(header, header_art):
    pin = header.instances[4]
    tr = synth.slip_truth(header.grasp, header_art.cam_T_tcp, bent=[(pin.id, math.radians(20), 1.0)])
    _, buf = synth.render_scene(header, tr, CAM)
    b = synth.bent_instance(pin, math.radians(20), 1.0)
    x, y = project(tr.cam_T_obj.apply(b.tip_point - 0.1 * MM * b.axis), CAM)
    assert buf.instance_id[int(y), int(x)] == pin.id + 1


def test_fingers_and_background(header, header_art, noiseless):
    _, (img, buf) = noiseless
    assert (buf.instance_id == FINGER_ID).sum() > 1000
    # pixels away from every surface are pure background (edge pixels are partly covered when supersampled)
    bg = cv2.erode((buf.instance_id == 0).astype(np.uint8), np.ones((3, 3), np.uint8)) > 0
    assert np.all(img[bg] == 230)
    finger = img[buf.instance_id == FINGER_ID]
    assert finger.max() <= 40


def test_no_finger_render(header, header_art):
    tr = synth.slip_truth(header.grasp, header_art.cam_T_tcp)
    tr.fingers = False
    _, buf = synth.render_scene(header, tr, CAM)
    assert not (buf.instance_id == FINGER_ID).any()


def test_noise_statistics_and_determinism(header, header_art, noiseless):
    tr0, (clean, buf) = noiseless
    tr = synth.SceneTruth(tr0.cam_T_tcp, tr0.cam_T_obj, tr0.offset, noise_sigma=5, seed=11)
    a, _ = synth.render_scene(header, tr, CAM)
    b, _ = synth.render_scene(header, tr, CAM)
    assert np.array_equal(a, b)
    bg = buf.instance_id == 0
    diff = a[bg].astype(float) - clean[bg]
    assert abs(diff.std() - 5) < 0.1 and abs(diff.mean()) < 0.05
    tr.seed = 12
    c, _ = synth.render_scene(header, tr, CAM)
    assert not np.array_equal(a, c)


def test_behind_camera(header, header_art):
    tr = synth.SceneTruth(RigidTransform.identity(), RigidTransform.identity(), fingers=False)
    with pytest.raises(BehindCamera):
        synth.render_scene(header, tr, CAM)


def test_scene_files_round_trip(tmp_path, noiseless):
    tr, (img, _) = noiseless
    synth.write_scene(tmp_path, "s0", img, tr)
    back, truth = synth.read_scene(tmp_path, "s0")
    assert np.array_equal(back, img) and truth.cam_T_obj.allclose(tr.cam_T_obj, 1e-15)
    with pytest.raises(OSError):
        synth.read_scene(tmp_path, "missing")
