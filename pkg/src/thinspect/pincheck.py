"""Per-pin straightness scores, cutoff calibration and the accept/reject verdict.

Every method compares the image against where a straight pin should appear
at the estimated object pose. The pin's model edges are its silhouette
edges rendered alone, minus those lying against other object geometry
(where the pin enters the body there is no image edge to find).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import NoSeparation, PinNotVisible
from .geometry import PinholeCamera, RigidTransform
from .match import _nms_edges, block_mean, normalized_gradients
from .render import BACKGROUND, object_tri_ids, projected_bbox, render_scene

log = logging.getLogger(__name__)

METHODS = ("gradient", "intensity_overlay", "edge_overlay", "distance_to_edge")
SUPERSAMPLE = 2


@dataclass
class PinScore:
    pin_id: int
    method: str
    score: float
    note: str = ""

    def __post_init__(self):
        self.score = float(min(max(self.score, 0.0), 1.0))


@dataclass
class InspectionReport:
    scores: list
    min_score: float
    cutoff: float
    accepted: bool
    method: str
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "cutoff": self.cutoff,
            "min_score": self.min_score,
            "accepted": self.accepted,
            "scores": [asdict(s) for s in self.scores],
            "warnings": list(self.warnings),
        }

    def summary(self) -> str:
        verdict = "ACCEPT" if self.accepted else "REJECT"
        lines = [f"{verdict} method={self.method} min_score={self.min_score:.3f} cutoff={self.cutoff:.3f}"]
        for s in self.scores:
            lines.append(f"  pin {s.pin_id}: {s.score:.3f}" + (f" ({s.note})" if s.note else ""))
        lines.extend(f"  warning: {w}" for w in self.warnings)
        return "\n".join(lines)


@dataclass
class BackgroundModel:
    """Global threshold on the difference from the known background level.

    With ``threshold`` None the image is split by Otsu instead.
    """

    level: float = 230.0
    threshold: float | None = 25.0

    def foreground(self, image) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        if self.threshold is not None:
            return np.abs(img - self.level) > self.threshold
        t, _ = cv2.threshold(np.clip(img, 0, 255).astype(np.uint8), 0, 255, cv2.THRESH_BINARY + cv2.THRESH_OTSU)
        return img <= t if self.level > t else img > t


@dataclass
class PinView:
    """Expected appearance of one straight pin: edge points and visible silhouette."""

    pin_id: int
    pixels: np.ndarray       # (n, 2) int x, y
    directions: np.ndarray   # (n, 2)
    silhouette: np.ndarray   # bool, full image size


def pin_view(mesh, instances, pin, cam_T_obj: RigidTransform, cam: PinholeCamera, exclude_px: int = 2,
             tri_ids=None, occluder=None) -> PinView:
    """Render the pin alone and against the rest of the object to find its usable edges.

    ``occluder`` is an optional full-image mask (gripper fingers) whose
    pixels are ignored.
    """
    ids = object_tri_ids(mesh, instances) if tri_ids is None else tri_ids
    v = cam_T_obj.apply(mesh.vertices)
    mine = ids == pin.id + 1
    if not mine.any():
        raise PinNotVisible(f"pin {pin.id} has no triangles")
    x0, y0, w, h = projected_bbox(v[np.unique(mesh.triangles[mine])], cam, pad=exclude_px + 4)
    if w == 0 or h == 0:
        raise PinNotVisible(f"pin {pin.id} projects outside the image")
    big = cam.scaled(SUPERSAMPLE)
    win2 = (x0 * SUPERSAMPLE, y0 * SUPERSAMPLE, w * SUPERSAMPLE, h * SUPERSAMPLE)
    alone = render_scene(v, mesh.triangles[mine], ids[mine], big, window=win2).instance_id != BACKGROUND
    cov = block_mean(alone.astype(np.float64), SUPERSAMPLE)
    if not cov.any():
        raise PinNotVisible(f"pin {pin.id} projects outside the image")
    win = (x0, y0, cov.shape[1], cov.shape[0])
    full = render_scene(v, mesh.triangles, ids, cam, window=win).instance_id
    rest = render_scene(v, mesh.triangles[~mine], ids[~mine], cam, window=win).instance_id != BACKGROUND
    visible = full == pin.id + 1
    if not visible.any():
        raise PinNotVisible(f"pin {pin.id} is hidden by other geometry")
    if exclude_px > 0:
        k = np.ones((2 * exclude_px + 1, 2 * exclude_px + 1), np.uint8)
        rest = cv2.dilate(rest.astype(np.uint8), k) > 0
    pts, dirs, _ = _nms_edges(cov)
    keep = ~rest[pts[:, 1], pts[:, 0]] if len(pts) else np.zeros(0, bool)
    pts, dirs = pts[keep], dirs[keep]
    sil = np.zeros((cam.height, cam.width), bool)
    sil[y0:y0 + visible.shape[0], x0:x0 + visible.shape[1]] = visible
    pixels = pts + np.array([x0, y0])
    inside = (pixels[:, 0] < cam.width) & (pixels[:, 1] < cam.height)
    pixels, dirs = pixels[inside], dirs[inside]
    if occluder is not None:
        free = ~occluder[pixels[:, 1], pixels[:, 0]]
        pixels, dirs = pixels[free], dirs[free]
        sil &= ~occluder
    if len(pixels) == 0 or not sil.any():
        raise PinNotVisible(f"pin {pin.id} has no usable edges")
    return PinView(pin.id, pixels, dirs, sil)


def edge_map(image, low: float = 50.0, high: float = 100.0) -> np.ndarray:
    return cv2.Canny(np.clip(image, 0, 255).astype(np.uint8), low, high) > 0


def edge_distance(edges: np.ndarray) -> np.ndarray:
    """Euclidean distance from every pixel to the nearest edge pixel."""
    if not edges.any():
        return np.full(edges.shape, np.inf)
    return cv2.distanceTransform((~edges).astype(np.uint8), cv2.DIST_L2, cv2.DIST_MASK_PRECISE)


def _gradient(image, view: PinView, g_min: float, grads=None) -> float:
    gx, gy = grads if grads is not None else normalized_gradients(image, g_min)
    x, y = view.pixels[:, 0], view.pixels[:, 1]
    return float(np.abs(gx[y, x] * view.directions[:, 0] + gy[y, x] * view.directions[:, 1]).mean())


def _intensity(image, view: PinView, bg: BackgroundModel) -> float:
    fg = bg.foreground(image)
    return float(fg[view.silhouette].mean())


def _edge_overlay(view: PinView, d, tolerance_px: float) -> float:
    return float((d[view.pixels[:, 1], view.pixels[:, 0]] <= tolerance_px).mean())


def _distance_to_edge(view: PinView, d, distance_px: float) -> float:
    return float((d[view.pixels[:, 1], view.pixels[:, 0]] < distance_px).mean())


class PinChecker:
    """Scores pins of one object in one image; caches edge maps and gradients."""

    def __init__(self, image, mesh, instances, cam_T_obj: RigidTransform, cam: PinholeCamera, config=None,
                 background: BackgroundModel | None = None, occluder=None):
        from .config import PincheckConfig

        self.image = np.asarray(image, dtype=np.float64)
        if self.image.shape[:2] != (cam.height, cam.width):
            from .errors import SizeMismatch

            raise SizeMismatch(f"image {self.image.shape[:2]} does not match camera {(cam.height, cam.width)}")
        self.mesh = mesh
        self.instances = list(instances)
        self.cam_T_obj = cam_T_obj
        self.cam = cam
        self.cfg = config or PincheckConfig()
        self.bg = background or BackgroundModel(self.cfg.background_level, self.cfg.background_threshold)
        self.tri_ids = object_tri_ids(mesh, self.instances)
        self.occluder = None if occluder is None else np.asarray(occluder, bool)
        self._edges = None
        self._dist = None
        self._grads = None
        self._views = {}

    @property
    def edges(self):
        if self._edges is None:
            self._edges = edge_map(self.image, self.cfg.canny_low, self.cfg.canny_high)
        return self._edges

    @property
    def distance(self):
        if self._dist is None:
            self._dist = edge_distance(self.edges)
        return self._dist

    @property
    def grads(self):
        if self._grads is None:
            self._grads = normalized_gradients(self.image, self.cfg.g_min)
        return self._grads

    def view(self, pin) -> PinView:
        if pin.id not in self._views:
            self._views[pin.id] = pin_view(self.mesh, self.instances, pin, self.cam_T_obj, self.cam,
                                           self.cfg.exclude_px, self.tri_ids, self.occluder)
        return self._views[pin.id]

    def score(self, pin, method: str | None = None) -> PinScore:
        method = method or self.cfg.method
        v = self.view(pin)
        if method == "gradient":
            s = _gradient(self.image, v, self.cfg.g_min, self.grads)
        elif method == "intensity_overlay":
            s = _intensity(self.image, v, self.bg)
        elif method == "edge_overlay":
            s = _edge_overlay(v, self.distance, self.cfg.edge_tolerance_px)
        elif method == "distance_to_edge":
            s = _distance_to_edge(v, self.distance, self.cfg.distance_px)
        else:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
        return PinScore(pin.id, method, s)


def score_gradient(image, cam_T_obj, pin, cam, mesh, instances, config=None) -> PinScore:
    return PinChecker(image, mesh, instances, cam_T_obj, cam, config).score(pin, "gradient")


def score_intensity_overlay(image, cam_T_obj, pin, cam, mesh, instances, bg=None, config=None) -> PinScore:
    return PinChecker(image, mesh, instances, cam_T_obj, cam, config, bg).score(pin, "intensity_overlay")


def score_edge_overlay(image, cam_T_obj, pin, cam, mesh, instances, config=None) -> PinScore:
    return PinChecker(image, mesh, instances, cam_T_obj, cam, config).score(pin, "edge_overlay")


def score_distance_to_edge(image, cam_T_obj, pin, cam, mesh, instances, config=None) -> PinScore:
    return PinChecker(image, mesh, instances, cam_T_obj, cam, config).score(pin, "distance_to_edge")


def calibrate_cutoff(straight_scores, bent_scores) -> float:
    """Midpoint between the worst straight and the best bent score."""
    straight = [float(s) for s in straight_scores]
    bent = [float(s) for s in bent_scores]
    if not straight or not bent:
        raise ValueError("both score populations must be non-empty")
    lo, hi = max(bent), min(straight)
    if not lo < hi:
        raise NoSeparation(f"bent max {lo:.3f} is not below straight min {hi:.3f}")
    return (lo + hi) / 2.0


def inspect(image, cam_T_obj, pins, method: str, cutoff: float, mesh, instances, cam, config=None,
            background=None, occluder=None) -> InspectionReport:
    """Score every pin; the part is accepted when the worst pin reaches the cutoff."""
    checker = PinChecker(image, mesh, instances, cam_T_obj, cam, config, background, occluder)
    scores, warnings = [], []
    for pin in pins:
        try:
            scores.append(checker.score(pin, method))
        except PinNotVisible as exc:
            scores.append(PinScore(pin.id, method, 0.0, f"not visible: {exc}"))
            warnings.append(f"pin {pin.id} not visible, rejecting")
    if not scores:
        warnings.append("no pins to inspect; accepting")
        log.warning("no pins to inspect; accepting")
        return InspectionReport([], 1.0, cutoff, True, method, warnings)
    min_score = min(s.score for s in scores)
    return InspectionReport(scores, min_score, cutoff, min_score >= cutoff, method, warnings)


def save_calibration(path, method: str, cutoff: float, straight, bent) -> None:
    doc = {"method": method, "cutoff": cutoff, "straight_scores": list(map(float, straight)),
           "bent_scores": list(map(float, bent))}
    Path(path).write_text(json.dumps(doc, indent=2))


def load_calibration(path) -> dict:
    from .errors import ParseError

    try:
        doc = json.loads(Path(path).read_text())
        float(doc["cutoff"])
        str(doc["method"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"bad calibration file {path}: {exc}") from exc
    return doc


def overlay(image, report: InspectionReport, views: dict) -> np.ndarray:
    """Color image with each pin's expected edges drawn green (passing) or red."""
    img = cv2.cvtColor(np.clip(image, 0, 255).astype(np.uint8), cv2.COLOR_GRAY2BGR)
    colors = {s.pin_id: (0, 200, 0) if s.score >= report.cutoff else (0, 0, 255) for s in report.scores}
    drawn = [(s, views[s.pin_id]) for s in report.scores if s.pin_id in views and len(views[s.pin_id].pixels)]
    for s, v in drawn:
        img[v.pixels[:, 1], v.pixels[:, 0]] = colors[s.pin_id]
    for s, v in drawn:
        x = int(v.pixels[:, 0].max()) + 4
        y = int(np.mean(v.pixels[:, 1])) + 4
        cv2.putText(img, f"{s.pin_id}:{s.score:.2f}", (x, y), cv2.FONT_HERSHEY_SIMPLEX, 0.35, colors[s.pin_id], 1,
                    cv2.LINE_AA)
    verdict = "ACCEPT" if report.accepted else "REJECT"
    cv2.putText(img, f"{verdict} {report.method} min={report.min_score:.2f} cut={report.cutoff:.2f}", (10, 24),
                cv2.FONT_HERSHEY_SIMPLEX, 0.6, (0, 200, 0) if report.accepted else (0, 0, 255), 1, cv2.LINE_AA)
    return img


def save_overlay(path, image, report: InspectionReport, checker: PinChecker) -> None:
    views = {}
    for s in report.scores:
        pin = next((p for p in checker.instances if p.id == s.pin_id), None)
        if pin is not None:
            try:
                views[pin.id] = checker.view(pin)
            except PinNotVisible:
                pass
    if not cv2.imwrite(str(path), overlay(image, report, views)):
        raise OSError(f"could not write {path}")
