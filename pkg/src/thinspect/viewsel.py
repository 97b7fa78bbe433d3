"""Inspection-pose candidates, occlusion sweep and pose selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, NoFeasiblePose, PinNotVisible
from .geometry import PinholeCamera, RigidTransform, rot_x, rot_y
from .model import GraspSpec
from .render import SceneRenderer, object_tri_ids

# TCP Z (pin direction) toward the camera, TCP X along image x
FRONTAL = np.diag([1.0, -1.0, -1.0])

DEFAULT_CANDIDATES = (
    ("front", "yaw", 0.0),
    ("yaw+45", "yaw", 45.0),
    ("yaw-45", "yaw", -45.0),
    ("yaw+90", "yaw", 90.0),
    ("yaw-90", "yaw", -90.0),
    ("tilt45", "tilt", 45.0),
)


@dataclass
class InspectionPoseCandidate:
    cam_T_tcp: RigidTransform
    name: str
    min_visibility: float = float("nan")
    max_pin_over_body: float = float("nan")
    feasible: bool = False
    angles: list = field(default_factory=list)
    per_angle: list = field(default_factory=list)
    note: str = ""
    plane_view: float = float("nan")

    def summary(self) -> dict:
        return {
            "name": self.name,
            "min_visibility": self.min_visibility,
            "max_pin_over_body": self.max_pin_over_body,
            "feasible": self.feasible,
            "angles_evaluated": len(self.angles),
            "plane_view": self.plane_view,
            "note": self.note,
        }


def candidate_rotation(kind: str, angle_deg: float) -> np.ndarray:
    """cam_R_tcp for a yaw about the camera's vertical axis or a tilt about its horizontal axis."""
    a = math.radians(angle_deg)
    if kind == "yaw":
        return rot_y(a) @ FRONTAL
    if kind == "tilt":
        return rot_x(a) @ FRONTAL
    raise ValueError(f"unknown candidate kind {kind!r}")


def object_center(mesh) -> np.ndarray:
    lo, hi = mesh.bounds
    return (lo + hi) / 2.0


def make_candidates(mesh, grasp: GraspSpec, distance: float = 0.15, spec=None) -> list[InspectionPoseCandidate]:
    """Candidate cam_T_tcp poses placing the object's bounding-box center on the optical axis."""
    center_tcp = grasp.tcp_T_obj.apply(object_center(mesh))
    out = []
    for name, kind, ang in spec or DEFAULT_CANDIDATES:
        R = candidate_rotation(kind, ang)
        t = np.array([0.0, 0.0, distance]) - R @ center_tcp
        out.append(InspectionPoseCandidate(RigidTransform(R, t), name))
    return out


def sweep_angles(range_deg: float = 20.0, step_deg: float = 5.0) -> np.ndarray:
    """Angles in radians from -range to +range inclusive."""
    n = int(round(2 * range_deg / step_deg)) + 1
    return np.radians(np.linspace(-range_deg, range_deg, n))


def plane_view(candidate: InspectionPoseCandidate, grasp: GraspSpec) -> float:
    """|cos| of the angle between the grasp-plane normal and the optical axis."""
    return float(abs((candidate.cam_T_tcp.rotation @ grasp.plane_normal)[2]))


def evaluate_pose(candidate: InspectionPoseCandidate, mesh, instances, grasp: GraspSpec, cam: PinholeCamera,
                  sweep=None, v_min: float = 0.95, o_max: float = 0.05,
                  plane_view_min: float = 0.5) -> InspectionPoseCandidate:
    """Fill visibility statistics over the in-hand rotation sweep.

    The part is rotated about the grasp-plane normal; every pin is rendered
    alone and inside the full object at each angle. A pose that sees the
    grasp plane nearly edge-on cannot resolve in-plane slip and is rejected.
    """
    candidate.plane_view = plane_view(candidate, grasp)
    angles = sweep_angles() if sweep is None else np.asarray(sweep, dtype=np.float64)
    ids = object_tri_ids(mesh, instances)
    min_vis, max_over = 1.0, 0.0
    per_angle = []
    try:
        for th in angles:
            cam_T_obj = candidate.cam_T_tcp @ grasp.tcp_T_obj_slipped(0.0, 0.0, th)
            sr = SceneRenderer(mesh, instances, cam_T_obj, cam, ids)
            vis = [sr.visibility(p.id) for p in instances]
            over = [sr.over_body(p.id) for p in instances]
            per_angle.append({
                "angle_deg": math.degrees(th),
                "min_visibility": min(vis, default=1.0),
                "max_pin_over_body": max(over, default=0.0),
            })
            min_vis = min(min_vis, *vis) if vis else min_vis
            max_over = max(max_over, *over) if over else max_over
    except (BehindCamera, PinNotVisible) as exc:
        candidate.min_visibility = 0.0
        candidate.max_pin_over_body = 1.0
        candidate.feasible = False
        candidate.angles = list(angles)
        candidate.per_angle = per_angle
        candidate.note = f"{type(exc).__name__}: {exc}"
        return candidate
    candidate.min_visibility = float(min_vis)
    candidate.max_pin_over_body = float(max_over)
    candidate.feasible = bool(min_vis >= v_min and max_over <= o_max and candidate.plane_view >= plane_view_min)
    if candidate.plane_view < plane_view_min:
        candidate.note = f"grasp plane seen at {candidate.plane_view:.2f} < {plane_view_min:.2f}"
    candidate.angles = list(angles)
    candidate.per_angle = per_angle
    return candidate


def select_pose(candidates) -> InspectionPoseCandidate:
    """Best feasible candidate: highest min visibility, lowest over-body, most face-on grasp plane, list order."""
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no candidates given")
    feasible = [(i, c) for i, c in enumerate(candidates) if c.feasible]
    if not feasible:
        raise NoFeasiblePose("no inspection pose keeps every pin visible against the background",
                             [c.summary() for c in candidates])
    def key(ic):
        i, c = ic
        pv = 0.0 if math.isnan(c.plane_view) else c.plane_view
        return (-c.min_visibility, c.max_pin_over_body, -pv, i)

    _, best = min(feasible, key=key)
    return best


def choose_inspection_pose(mesh, instances, grasp, cam, distance=0.15, sweep=None, v_min=0.95, o_max=0.05,
                           spec=None, plane_view_min=0.5):
    """Evaluate every candidate; return (selected, all candidates)."""
    cands = make_candidates(mesh, grasp, distance, spec)
    for c in cands:
        evaluate_pose(c, mesh, instances, grasp, cam, sweep, v_min, o_max, plane_view_min)
    return select_pose(cands), cands
