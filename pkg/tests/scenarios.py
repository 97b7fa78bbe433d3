"""Constructed scenes shared by unit and acceptance tests."""

import numpy as np

from thinspect import synth, viewsel
from thinspect.geometry import RigidTransform
from thinspect.model import GraspSpec, TriMesh
from thinspect.pinseg import PinInstance

MM = 1e-3


def tilted_dsub_grasp(component):
    """Grasp of the dsub part whose pins face the camera only in the 45 degree tilt candidate.

    The part is held so that its pin axis is the tilt candidate's view ray
    and the grasp normal is that same ray: in-hand rotation then spins the
    part about the line of sight and every pin stays in view.
    """
    d = viewsel.candidate_rotation("tilt", 45.0).T @ np.array([0.0, 0.0, 1.0])
    ox, oy = d, np.array([1.0, 0.0, 0.0])
    tcp_R_obj = np.stack([ox, oy, np.cross(ox, oy)], axis=1)
    obj_T_tcp = RigidTransform(tcp_R_obj.T, (0.0, 0.0, synth._tcp_z(component.spec)))
    return GraspSpec(obj_T_tcp, component.grasp.finger_boxes, tuple(d))


def collared_pin():
    """One pin standing inside a taller square tube: hidden or over body from every candidate view."""
    s = synth.default_spec("header_grid", pin_shape="cylinder")
    pin = synth._pin_mesh(s, "cylinder", 0.6 * MM, 0.0, 3 * MM, (0, 0))
    step = 0.5 * MM
    walls = [
        synth.grid_box((-2 * MM, -2 * MM, 0), (-1 * MM, 2 * MM, 4 * MM), step),
        synth.grid_box((1 * MM, -2 * MM, 0), (2 * MM, 2 * MM, 4 * MM), step),
        synth.grid_box((-1 * MM, -2 * MM, 0), (1 * MM, -1 * MM, 4 * MM), step),
        synth.grid_box((-1 * MM, 1 * MM, 0), (1 * MM, 2 * MM, 4 * MM), step),
        synth.grid_box((-3 * MM, -3 * MM, -2 * MM), (3 * MM, 3 * MM, 0), step),
    ]
    mesh = TriMesh.concatenate([pin] + walls)
    inst = [PinInstance(1, range(len(pin.vertices)), (0, 0, 1), (0, 0, 0), (0, 0, 3 * MM), 0.3 * MM)]
    grasp = GraspSpec(RigidTransform.from_translation((0, 0, -1 * MM)),
                      [((-1 * MM, -4 * MM, -1 * MM), (1 * MM, -3.5 * MM, 1 * MM))])
    return mesh, inst, grasp
