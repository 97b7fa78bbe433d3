"""Synthetic evaluation protocols: pose offset suites, bent-pin suites, grasp trials and segmentation metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import insertion as ins
from . import synth
from .errors import NoMatch, ParseError, PinNotVisible
from .geometry import RigidTransform, random_transform, rotation_angle
from .model import PIN
from .match import finger_mask
from .pincheck import METHODS, pin_view
from .render import object_tri_ids
from .pipeline import SetupArtifact, checker, estimate, inspect_image

SUITE_FILE = "suite.json"


@dataclass
class Scene:
    name: str
    image: np.ndarray
    truth: synth.SceneTruth


def pose_offsets(step: float = 2.5e-3, angles_deg=(-10.0, 0.0, 10.0)) -> list[tuple]:
    """Four diagonal (+-step, +-step) shifts at each angle."""
    out = []
    for a in angles_deg:
        for sx, sy in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            out.append((sx * step, sy * step, math.radians(a)))
    return out


def pose_suite(component: synth.Component, cam_T_tcp: RigidTransform, cam, noise_sigma: float = 5.0,
               seed: int = 0, offsets=None, supersample: int = 2) -> list[Scene]:
    """A calibration capture plus one capture per TCP offset; the part stays put in the hand."""
    offsets = pose_offsets() if offsets is None else offsets
    scenes = []
    for i, off in enumerate([(0.0, 0.0, 0.0)] + list(offsets)):
        tr = synth.motion_truth(component.grasp, cam_T_tcp, *off, noise_sigma=noise_sigma, seed=seed + i)
        img, _ = synth.render_scene(component, tr, cam, supersample)
        scenes.append(Scene("calib" if i == 0 else f"offset{i:02d}", img, tr))
    return scenes


def in_plane_azimuth(pin, cam_T_obj: RigidTransform) -> float:
    """Bend azimuth whose direction lies in the image plane (perpendicular to the view ray)."""
    view_obj = cam_T_obj.rotation.T @ np.array([0.0, 0.0, 1.0])
    return synth.azimuth_of(pin, view_obj) + math.pi / 2


def blocking_angle(spec: synth.ComponentSpec) -> float:
    """Smallest bend that moves the tip out of its hole."""
    return math.asin(min(spec.clearance / spec.pin_length, 1.0))


def hidden_fraction(component: synth.Component, cam_T_obj: RigidTransform, cam, mask, tri_ids=None) -> float:
    """Largest share of any insertion pin's edge points covered by ``mask`` (1.0 when a pin cannot be seen)."""
    ids = object_tri_ids(component.mesh, component.instances) if tri_ids is None else tri_ids
    worst = 0.0
    for p in component.insertion_pins:
        try:
            v = pin_view(component.mesh, component.instances, p, cam_T_obj, cam, 2, ids)
        except PinNotVisible:
            return 1.0
        worst = max(worst, float(mask[v.pixels[:, 1], v.pixels[:, 0]].mean()))
    return worst


def pincheck_suite(component: synth.Component, cam_T_tcp: RigidTransform, cam, n_straight: int = 5,
                   n_bent: int = 5, noise_sigma: float = 5.0, seed: int = 0, max_shift: float = 2.0e-3,
                   max_turn_deg: float = 10.0, bend_deg=(10.0, 20.0), azimuth_spread_deg: float = 30.0,
                   supersample: int = 2, max_hidden: float = 0.5, finger_margin_mm: float = 1.0) -> list[Scene]:
    """Straight and single-bent-pin captures with random in-hand slip.

    Bends point within ``azimuth_spread_deg`` of the image plane and always
    exceed the insertion-blocking angle. Slips that push a pin behind the
    fingers (more than ``max_hidden`` of its edges under the finger mask)
    are redrawn, since such a capture cannot be inspected at all.
    """
    rng = np.random.default_rng(seed)
    pins = component.insertion_pins
    lo = max(math.radians(bend_deg[0]), 1.05 * blocking_angle(component.spec))
    hi = max(math.radians(bend_deg[1]), lo)
    grasp = component.grasp
    depth = float((cam_T_tcp @ grasp.tcp_T_obj).translation[2])
    mask = finger_mask(grasp, cam_T_tcp, cam, finger_margin_mm * 1e-3 * cam.focal_length / depth)
    tri_ids = object_tri_ids(component.mesh, component.instances)
    scenes = []
    for i in range(n_straight + n_bent):
        for _ in range(100):
            dx, dy = rng.uniform(-max_shift, max_shift, 2)
            th = math.radians(rng.uniform(-max_turn_deg, max_turn_deg))
            pose = cam_T_tcp @ grasp.tcp_T_obj_slipped(dx, dy, th)
            if hidden_fraction(component, pose, cam, mask, tri_ids) <= max_hidden:
                break
        else:
            raise ValueError("no slip keeps the pins clear of the fingers")
        bent = []
        if i >= n_straight and pins:
            p = pins[int(rng.integers(len(pins)))]
            nominal = cam_T_tcp @ grasp.tcp_T_obj
            az = in_plane_azimuth(p, nominal) + (0 if rng.random() < 0.5 else math.pi)
            az += math.radians(rng.uniform(-azimuth_spread_deg, azimuth_spread_deg))
            bent = [(p.id, float(rng.uniform(lo, hi)), float(az))]
        tr = synth.slip_truth(component.grasp, cam_T_tcp, dx, dy, th, noise_sigma=noise_sigma,
                              seed=seed * 1000 + i, bent=bent)
        img, _ = synth.render_scene(component, tr, cam, supersample)
        scenes.append(Scene(f"{'bent' if bent else 'straight'}{i:02d}", img, tr))
    return scenes


def write_suite(directory, scenes, kind: str, family: str | None = None, extra: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for s in scenes:
        synth.write_scene(d, s.name, s.image, s.truth)
    doc = {"kind": kind, "family": family, "scenes": [s.name for s in scenes]}
    doc.update(extra or {})
    (d / SUITE_FILE).write_text(json.dumps(doc, indent=2))
    return d


def read_suite(directory) -> tuple[dict, list[Scene]]:
    d = Path(directory)
    try:
        doc = json.loads((d / SUITE_FILE).read_text())
        names = doc["scenes"]
    except (OSError, ValueError, KeyError) as exc:
        raise ParseError(f"{d} is not a scene suite: {exc}") from exc
    if not names:
        raise ParseError(f"suite {d} has no scenes")
    scenes = []
    for n in names:
        try:
            img, tr = synth.read_scene(d, n)
        except (OSError, ValueError, KeyError) as exc:
            raise ParseError(f"missing or bad scene {n} in {d}: {exc}") from exc
        scenes.append(Scene(n, img, tr))
    return doc, scenes


# ------------------------------------------------------------------ pose


@dataclass
class PoseRow:
    name: str
    offset: tuple
    score: float
    error_mm: float          # estimate vs pose predicted from the calibration capture
    truth_error_mm: float    # estimate vs ground truth
    angle_error_deg: float   # rotation of estimate vs ground truth
    matched: bool = True


@dataclass
class PoseEval:
    rows: list = field(default_factory=list)

    def _ok(self):
        return [r for r in self.rows if r.matched]

    @property
    def mean_mm(self) -> float:
        return float(np.mean([r.error_mm for r in self._ok()])) if self._ok() else float("inf")

    @property
    def max_mm(self) -> float:
        return float(np.max([r.error_mm for r in self._ok()])) if self._ok() else float("inf")

    @property
    def mean_deg(self) -> float:
        return float(np.mean([r.angle_error_deg for r in self._ok()])) if self._ok() else float("inf")

    @property
    def failures(self) -> int:
        return sum(not r.matched for r in self.rows)

    def table(self) -> str:
        lines = [f"{'scene':<10} {'dx mm':>7} {'dy mm':>7} {'dth':>6} {'score':>6} {'err mm':>7} {'truth':>7} {'deg':>6}"]
        for r in self.rows:
            dx, dy, dth = r.offset
            if r.matched:
                lines.append(f"{r.name:<10} {dx * 1e3:7.2f} {dy * 1e3:7.2f} {math.degrees(dth):6.1f} "
                             f"{r.score:6.3f} {r.error_mm:7.3f} {r.truth_error_mm:7.3f} {r.angle_error_deg:6.3f}")
            else:
                lines.append(f"{r.name:<10} {dx * 1e3:7.2f} {dy * 1e3:7.2f} {math.degrees(dth):6.1f}  no match")
        lines.append(f"mean {self.mean_mm:.3f} mm  max {self.max_mm:.3f} mm  mean rot {self.mean_deg:.3f} deg"
                     f"  failures {self.failures}")
        return "\n".join(lines)


def evaluate_pose(art: SetupArtifact, scenes) -> PoseEval:
    """Calibrate the in-hand pose on the first capture, then compare every other estimate to its prediction."""
    scenes = list(scenes)
    calib = next((s for s in scenes if s.name == "calib"), scenes[0])
    est = estimate(art, calib.image)
    tcp_T_obj_calib = ins.calib_in_hand(calib.truth.cam_T_tcp, est.cam_T_obj)
    out = PoseEval()
    for s in scenes:
        if s is calib:
            continue
        try:
            r = estimate(art, s.image)
        except NoMatch:
            out.rows.append(PoseRow(s.name, s.truth.offset, 0.0, math.inf, math.inf, math.inf, False))
            continue
        expected = ins.expected_cam_pose(s.truth.cam_T_tcp, tcp_T_obj_calib)
        err = np.linalg.norm(r.cam_T_obj.translation - expected.translation) * 1e3
        terr = np.linalg.norm(r.cam_T_obj.translation - s.truth.cam_T_obj.translation) * 1e3
        aerr = math.degrees(rotation_angle(r.cam_T_obj.rotation.T @ s.truth.cam_T_obj.rotation))
        out.rows.append(PoseRow(s.name, s.truth.offset, r.score, float(err), float(terr), aerr))
    return out


# ------------------------------------------------------------------ pin check


def map_pins(found, truth) -> dict:
    """Ground-truth pin id -> id of the found instance with the nearest base point."""
    out = {}
    if not found:
        return out
    bases = np.array([p.base_point for p in found])
    for t in truth:
        k = int(np.argmin(np.linalg.norm(bases - t.base_point, axis=1)))
        out[t.id] = found[k].id
    return out


@dataclass
class PincheckEval:
    straight: dict = field(default_factory=lambda: {m: [] for m in METHODS})
    bent: dict = field(default_factory=lambda: {m: [] for m in METHODS})
    no_match: int = 0

    def separated(self, method: str) -> bool:
        s, b = self.straight[method], self.bent[method]
        return bool(s and b and max(b) < min(s))

    def table(self) -> str:
        lines = [f"{'method':<18} {'straight min':>12} {'bent max':>9} {'n_s':>4} {'n_b':>4}  verdict"]
        for m in METHODS:
            s, b = self.straight[m], self.bent[m]
            if not s or not b:
                lines.append(f"{m:<18} {'-':>12} {'-':>9} {len(s):>4} {len(b):>4}  n/a")
                continue
            lines.append(f"{m:<18} {min(s):12.3f} {max(b):9.3f} {len(s):>4} {len(b):>4}  "
                         f"{'separates' if self.separated(m) else 'overlaps'}")
        if self.no_match:
            lines.append(f"no match in {self.no_match} scene(s)")
        return "\n".join(lines)


def evaluate_pincheck(art: SetupArtifact, scenes, truth_instances, methods=METHODS) -> PincheckEval:
    """Scores of bent pins and of every pin in straight captures.

    Pins that are straight but share a capture with a bent pin are left out
    of both populations, matching a per-part labeling.
    """
    ids = map_pins(art.pins, truth_instances)
    out = PincheckEval()
    for s in scenes:
        try:
            r = estimate(art, s.image)
        except NoMatch:
            out.no_match += 1
            continue
        ch = checker(art, s.image, r.cam_T_obj)
        bent_ids = {ids.get(b[0]) for b in s.truth.bent}
        for p in art.pins:
            if s.truth.bent and p.id not in bent_ids:
                continue
            for m in methods:
                try:
                    sc = ch.score(p, m).score
                except Exception:
                    sc = 0.0
                (out.bent if p.id in bent_ids else out.straight)[m].append(sc)
    return out


# ------------------------------------------------------------------ grasp trials


@dataclass
class TrialResult:
    name: str
    bent: bool
    accepted: bool
    min_score: float
    holes_green: int
    holes: int
    matched: bool = True

    @property
    def all_green(self) -> bool:
        return self.holes > 0 and self.holes_green == self.holes


def teach_insertion(art: SetupArtifact, component: synth.Component, rng, noise_sigma: float = 5.0):
    """Teach an insertion from one capture of the nominal grasp. Returns (record, base_T_board)."""
    tr = synth.slip_truth(component.grasp, art.cam_T_tcp, noise_sigma=noise_sigma, seed=int(rng.integers(1 << 30)))
    img, _ = synth.render_scene(component, tr, art.cam)
    est = ins.calib_in_hand(art.cam_T_tcp, estimate(art, img).cam_T_obj)
    base_T_tcp_ins = random_transform(rng, 0.3)
    record = ins.teach(base_T_tcp_ins, est, art.pins, component.spec.hole_diameter)
    # the physical board sits where the object truly was when taught
    base_T_board = base_T_tcp_ins @ ins.tcp_from_obj(tr.cam_T_tcp, tr.cam_T_obj)
    return record, base_T_board


def observed_pins(art: SetupArtifact, component: synth.Component, truth: synth.SceneTruth) -> list:
    """Segmented pins with tips moved to where bending put them."""
    ids = map_pins(art.pins, component.instances)
    bends = {ids.get(pid): (a, az) for pid, a, az in truth.bent}
    return [synth.bent_instance(p, *bends[p.id]) if p.id in bends else p for p in art.pins]


def grasp_trial(art: SetupArtifact, component: synth.Component, scene: Scene, record, base_T_board,
                method: str | None = None, cutoff: float | None = None) -> tuple[TrialResult, np.ndarray]:
    """Inspect one capture and check the compensated insertion against the board holes."""
    try:
        result, report = inspect_image(art, scene.image, method, cutoff)
    except NoMatch:
        return TrialResult(scene.name, bool(scene.truth.bent), False, 0.0, 0, len(record.pin_ids), False), scene.image
    cur_est = ins.tcp_from_obj(art.cam_T_tcp, result.cam_T_obj)
    cur_true = ins.tcp_from_obj(scene.truth.cam_T_tcp, scene.truth.cam_T_obj)
    board_T_obj = ins.landing_pose(record, cur_est, cur_true, base_T_board)
    cam_T_board = scene.truth.cam_T_obj @ board_T_obj.inverse()
    pins = observed_pins(art, component, scene.truth)
    img, verdicts = ins.overlay_holes(scene.image, cam_T_board, record, pins, scene.truth.cam_T_obj, art.cam)
    green = sum(v.ok for v in verdicts)
    return TrialResult(scene.name, bool(scene.truth.bent), report.accepted, report.min_score, green,
                       len(verdicts)), img


def calibrate_from_scenes(art: SetupArtifact, scenes, truth_instances, method: str = "gradient") -> float:
    from .pincheck import calibrate_cutoff

    ev = evaluate_pincheck(art, scenes, truth_instances, (method,))
    cutoff = calibrate_cutoff(ev.straight[method], ev.bent[method])
    art.save_calibration(method, cutoff, ev.straight[method], ev.bent[method])
    return cutoff


# ------------------------------------------------------------------ segmentation


@dataclass
class SegEval:
    precision: float
    recall: float
    n_found: int
    n_truth: int
    n_insertion: int
    n_contact: int
    studs_removed: bool

    def summary(self) -> str:
        return (f"precision {self.precision:.3f} recall {self.recall:.3f} instances {self.n_found}/{self.n_truth} "
                f"insertion pins {self.n_insertion}/{self.n_contact} studs removed {self.studs_removed}")


def evaluate_segmentation(seg, truth_labels, truth_pins, contact_ids) -> SegEval:
    """Per-vertex precision/recall of the pin label plus instance and stud-filter checks."""
    truth = np.asarray(truth_labels) == PIN
    pred = np.asarray(seg.per_vertex_label) == PIN
    tp = int((truth & pred).sum())
    precision = tp / max(int(pred.sum()), 1)
    recall = tp / max(int(truth.sum()), 1)
    contact = set(contact_ids)
    studs = [p for p in truth_pins if p.id not in contact]
    kept = np.array([p.base_point for p in seg.insertion_instances]).reshape(-1, 3)
    removed = not any(len(kept) and np.min(np.linalg.norm(kept - s.base_point, axis=1)) < 1e-3 for s in studs)
    return SegEval(precision, recall, len(seg.instances), len(truth_pins), len(seg.insertion_instances),
                   len(contact), removed)


def evaluate_component_segmentation(component: synth.Component, seg) -> SegEval:
    return evaluate_segmentation(seg, component.labels, component.instances,
                                 [p.id for p in component.insertion_pins])


# ------------------------------------------------------------------ files


@dataclass
class TruthPin:
    id: int
    base_point: np.ndarray
    tip_point: np.ndarray


def pins_doc(pins, contact_ids=None) -> list:
    contact = set(contact_ids) if contact_ids is not None else {p.id for p in pins}
    return [{"id": int(p.id), "base": np.asarray(p.base_point).tolist(), "tip": np.asarray(p.tip_point).tolist(),
             "contact": p.id in contact} for p in pins]


def pins_from_doc(doc) -> list:
    return [TruthPin(int(d["id"]), np.asarray(d["base"], float), np.asarray(d["tip"], float)) for d in doc]


def write_component(directory, component: synth.Component) -> Path:
    """Mesh, grasp, per-vertex labels and pin list of a generated part."""
    from .model import save_grasp, save_mesh_ply

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_mesh_ply(d / "mesh.ply", component.mesh)
    save_grasp(d / "grasp.json", component.grasp)
    np.save(d / "labels.npy", component.labels.astype(np.int8))
    doc = {"spec": component.spec.to_dict(),
           "pins": pins_doc(component.instances, [p.id for p in component.insertion_pins])}
    (d / "component.json").write_text(json.dumps(doc, indent=2))
    return d


def read_component(directory):
    """(mesh, grasp, labels, truth pins, contact ids) written by ``write_component``."""
    from .model import load_grasp, load_mesh

    d = Path(directory)
    try:
        doc = json.loads((d / "component.json").read_text())
        labels = np.load(d / "labels.npy")
    except (OSError, ValueError) as exc:
        raise ParseError(f"{d} is not a generated component: {exc}") from exc
    mesh = load_mesh(d / "mesh.ply")
    if len(labels) != len(mesh.vertices):
        raise ParseError(f"{d}: {len(labels)} labels for {len(mesh.vertices)} vertices")
    pins = pins_from_doc(doc["pins"])
    return mesh, load_grasp(d / "grasp.json"), labels, pins, [p["id"] for p in doc["pins"] if p["contact"]]
