"""Transform bookkeeping for in-hand correction and the hole-projection check.

Naming: ``a_T_b`` maps coordinates in frame b into frame a. The taught
insertion stores where the object sat in the robot base frame; a new grasp
is compensated by moving the TCP so the object lands at that same pose.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import NonPositiveDepth, ParseError
from .geometry import PinholeCamera, RigidTransform, transform_from_doc


def tcp_from_obj(cam_T_tcp: RigidTransform, cam_T_obj: RigidTransform) -> RigidTransform:
    """Object pose in the TCP frame from two camera-frame poses."""
    return cam_T_tcp.inverse() @ cam_T_obj


def obj_ins_in_base(base_T_ins: RigidTransform, tcp_T_obj: RigidTransform) -> RigidTransform:
    """Inserted object pose in the base frame from the taught TCP pose."""
    return base_T_ins @ tcp_T_obj


def compensated_pose(base_T_obj_ins: RigidTransform, tcp_T_obj_current: RigidTransform) -> RigidTransform:
    """TCP pose that puts the currently grasped object at the taught inserted pose."""
    return base_T_obj_ins @ tcp_T_obj_current.inverse()


def calib_in_hand(cam_T_tcp: RigidTransform, cam_T_obj: RigidTransform) -> RigidTransform:
    """In-hand object pose measured at the calibration configuration."""
    return tcp_from_obj(cam_T_tcp, cam_T_obj)


def expected_cam_pose(cam_T_tcp_test: RigidTransform, tcp_T_obj_calib: RigidTransform) -> RigidTransform:
    """Where the object should appear when the TCP is at ``cam_T_tcp_test``."""
    return cam_T_tcp_test @ tcp_T_obj_calib


def visual_correction_pose(base_T_obj: RigidTransform, tcp_T_obj_current: RigidTransform) -> RigidTransform:
    """TCP pose for a recorded object pose given the current in-hand estimate."""
    return base_T_obj @ tcp_T_obj_current.inverse()


def hole_pixel_diameter(diameter: float, depth: float, focal_length: float) -> float:
    if depth <= 0:
        raise NonPositiveDepth(f"hole depth {depth} is not in front of the camera")
    return diameter * focal_length / depth


@dataclass
class InsertionRecord:
    """Taught insertion: TCP and object poses in the base frame plus the board holes.

    Hole centers are in the board frame, which coincides with the object
    frame at the taught inserted pose. ``pin_ids[i]`` is the pin that
    goes into hole ``i``.
    """

    base_T_tcp_ins: RigidTransform
    base_T_obj_ins: RigidTransform
    hole_centers: np.ndarray
    hole_diameters: np.ndarray
    pin_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.hole_centers = np.asarray(self.hole_centers, dtype=np.float64).reshape(-1, 3)
        self.hole_diameters = np.asarray(self.hole_diameters, dtype=np.float64).reshape(-1)
        if len(self.hole_centers) != len(self.hole_diameters):
            raise ValueError("hole centers and diameters differ in length")
        if not self.pin_ids:
            self.pin_ids = list(range(1, len(self.hole_centers) + 1))
        if len(self.pin_ids) != len(self.hole_centers):
            raise ValueError("pin_ids must name one pin per hole")

    def to_dict(self) -> dict:
        return {
            "base_T_tcp_ins": self.base_T_tcp_ins.matrix().tolist(),
            "base_T_obj_ins": self.base_T_obj_ins.matrix().tolist(),
            "holes": [{"pin_id": int(p), "center": c.tolist(), "diameter": float(d)}
                      for p, c, d in zip(self.pin_ids, self.hole_centers, self.hole_diameters)],
        }

    @classmethod
    def from_dict(cls, d) -> InsertionRecord:
        holes = d.get("holes", [])
        return cls(transform_from_doc(d["base_T_tcp_ins"]), transform_from_doc(d["base_T_obj_ins"]),
                   np.array([h["center"] for h in holes]).reshape(-1, 3),
                   np.array([h["diameter"] for h in holes]), [int(h["pin_id"]) for h in holes])


def save_record(path, record: InsertionRecord) -> None:
    Path(path).write_text(json.dumps(record.to_dict(), indent=2))


def load_record(path) -> InsertionRecord:
    try:
        return InsertionRecord.from_dict(json.loads(Path(path).read_text()))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"bad insertion record {path}: {exc}") from exc


def teach(base_T_tcp_ins: RigidTransform, tcp_T_obj: RigidTransform, pins, hole_diameter: float) -> InsertionRecord:
    """Record a taught insertion with one hole per pin, centered on the straight pin's tip."""
    pins = sorted(pins, key=lambda p: p.id)
    centers = np.array([p.tip_point for p in pins]).reshape(-1, 3)
    return InsertionRecord(base_T_tcp_ins, obj_ins_in_base(base_T_tcp_ins, tcp_T_obj), centers,
                           np.full(len(pins), float(hole_diameter)), [p.id for p in pins])


@dataclass
class HoleVerdict:
    pin_id: int
    hole_px: tuple
    tip_px: tuple
    radius_px: float
    allowed_px: float
    ok: bool

    @property
    def offset_px(self) -> float:
        return float(np.hypot(self.tip_px[0] - self.hole_px[0], self.tip_px[1] - self.hole_px[1]))


def hole_verdicts(cam_T_board: RigidTransform, record: InsertionRecord, pins, cam_T_obj: RigidTransform,
                  cam: PinholeCamera) -> list[HoleVerdict]:
    """Green when the projected pin tip lies inside its hole circle shrunk by the projected pin radius."""
    by_id = {p.id: p for p in pins}
    out = []
    for pid, c, d in zip(record.pin_ids, record.hole_centers, record.hole_diameters):
        center = cam_T_board.apply(c)
        if center[2] <= 0:
            raise NonPositiveDepth(f"hole for pin {pid} is behind the camera")
        hole_px = cam.project(center)
        r_px = hole_pixel_diameter(d, center[2], cam.focal_length) / 2.0
        pin = by_id.get(pid)
        if pin is None:
            out.append(HoleVerdict(pid, tuple(hole_px), (np.nan, np.nan), r_px, 0.0, False))
            continue
        tip = cam_T_obj.apply(pin.tip_point)
        tip_px = cam.project(tip)
        pin_r_px = pin.nominal_radius * cam.focal_length / tip[2]
        allowed = max(r_px - pin_r_px, 0.0)
        ok = bool(np.hypot(*(tip_px - hole_px)) <= allowed)
        out.append(HoleVerdict(pid, tuple(map(float, hole_px)), tuple(map(float, tip_px)), float(r_px),
                               float(allowed), ok))
    return out


def overlay_holes(image, cam_T_board: RigidTransform, record: InsertionRecord, pins, cam_T_obj: RigidTransform,
                  cam: PinholeCamera):
    """Draw every hole as a circle (green or red) over the image. Returns (BGR image, verdicts)."""
    verdicts = hole_verdicts(cam_T_board, record, pins, cam_T_obj, cam)
    img = np.asarray(image)
    if img.ndim == 2:
        img = cv2.cvtColor(np.clip(img, 0, 255).astype(np.uint8), cv2.COLOR_GRAY2BGR)
    else:
        img = img.copy()
    shift = 4
    scale = 1 << shift
    for v in verdicts:
        color = (0, 200, 0) if v.ok else (0, 0, 255)
        center = (int(round(v.hole_px[0] * scale)), int(round(v.hole_px[1] * scale)))
        cv2.circle(img, center, max(int(round(v.radius_px * scale)), 1), color, 1, cv2.LINE_AA, shift)
        if np.isfinite(v.tip_px[0]):
            tip = (int(round(v.tip_px[0] * scale)), int(round(v.tip_px[1] * scale)))
            cv2.drawMarker(img, (tip[0] >> shift, tip[1] >> shift), color, cv2.MARKER_CROSS, 5, 1)
    return img, verdicts


def landing_pose(record: InsertionRecord, tcp_T_obj_estimate: RigidTransform, tcp_T_obj_true: RigidTransform,
                 base_T_board: RigidTransform | None = None) -> RigidTransform:
    """Board-frame pose of the real object after a compensated insertion (board_T_obj).

    The robot moves to the pose compensating for the estimated grasp while
    the object actually sits at ``tcp_T_obj_true``; identity means a perfect
    landing. The board defaults to the recorded inserted object pose.
    """
    base_T_tcp = compensated_pose(record.base_T_obj_ins, tcp_T_obj_estimate)
    if base_T_board is None:
        base_T_board = record.base_T_obj_ins
    return base_T_board.inverse() @ base_T_tcp @ tcp_T_obj_true
