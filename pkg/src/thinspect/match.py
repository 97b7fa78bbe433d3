"""Grasp-constrained template generation and pyramid gradient matching.

A grasped part can only slide in the finger plane and turn about the plane
normal, so the search is over image shift and one angle. Templates are
silhouette edge points with gradient directions, rendered once per angle.
Similarity is the mean absolute cosine between template directions and
normalized image gradients, which ignores contrast polarity.
"""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from numba import njit
from scipy.ndimage import maximum_filter

from .config import MatchConfig
from .errors import ArtifactError, NoMatch, OutOfBounds, SizeMismatch, TooFewEdges
from .geometry import PinholeCamera, Pose2D, RigidTransform, axis_angle_matrix
from .model import GraspSpec
from .render import BACKGROUND, projected_bbox, render_scene

log = logging.getLogger(__name__)

TEMPLATE_VERSION = 1
SUPERSAMPLE = 2


@dataclass
class Template:
    theta: float
    level: int
    pixels: np.ndarray       # (n, 2) int32 x, y in level image coordinates
    directions: np.ndarray   # (n, 2) unit gradient directions
    anchor: np.ndarray       # projection of the object origin, level coordinates

    @property
    def offsets(self) -> np.ndarray:
        """Edge-point centers relative to the anchor."""
        return self.pixels + 0.5 - self.anchor

    def __len__(self):
        return len(self.pixels)


@dataclass
class TemplateSet:
    levels: int
    thetas: list                 # per level, radians
    templates: list              # per level, list of Template aligned with thetas
    grasp_plane_depth: float
    cam: PinholeCamera
    cam_T_tcp: RigidTransform
    tcp_T_obj: RigidTransform
    plane_normal: np.ndarray     # grasp normal in the TCP frame
    finger_mask: np.ndarray      # level-0 bool image
    g_min: float = 10.0
    meta: dict = field(default_factory=dict)

    @property
    def cam_T_obj_nominal(self) -> RigidTransform:
        return self.cam_T_tcp @ self.tcp_T_obj

    @property
    def normal_cam(self) -> np.ndarray:
        return self.cam_T_tcp.rotation @ self.plane_normal

    def object_pose(self, theta: float) -> RigidTransform:
        """cam_T_obj for an in-hand rotation ``theta`` about the grasp normal through the TCP."""
        slip = RigidTransform(axis_angle_matrix(self.plane_normal, theta), np.zeros(3))
        return self.cam_T_tcp @ slip @ self.tcp_T_obj


@dataclass
class MatchResult:
    pose2d: Pose2D
    score: float
    cam_T_obj: RigidTransform
    level_scores: list = field(default_factory=list)
    refined: bool = False

    def to_dict(self) -> dict:
        return {
            "x": self.pose2d.x,
            "y": self.pose2d.y,
            "theta_deg": math.degrees(self.pose2d.theta),
            "score": self.score,
            "refined": self.refined,
            "cam_T_obj": self.cam_T_obj.matrix().tolist(),
        }


# ------------------------------------------------------------------ images


def block_mean(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img
    h, w = img.shape[0] // factor * factor, img.shape[1] // factor * factor
    return img[:h, :w].reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def normalized_gradients(img: np.ndarray, g_min: float):
    """Sobel gradient directions, zeroed where the magnitude is below ``g_min``."""
    f = np.asarray(img, dtype=np.float32)
    gx = cv2.Sobel(f, cv2.CV_32F, 1, 0, ksize=3)
    gy = cv2.Sobel(f, cv2.CV_32F, 0, 1, ksize=3)
    mag = np.sqrt(gx * gx + gy * gy)
    keep = mag >= g_min
    inv = np.where(keep, 1.0 / np.maximum(mag, 1e-12), 0.0).astype(np.float32)
    return gx * inv, gy * inv


@dataclass
class ImageGradients:
    gx: list
    gy: list

    @classmethod
    def build(cls, image, levels: int = 1, g_min: float = 10.0) -> ImageGradients:
        img = np.asarray(image, dtype=np.float32)
        gxs, gys = [], []
        for lvl in range(levels):
            gx, gy = normalized_gradients(block_mean(img, 2 ** lvl), g_min)
            gxs.append(gx)
            gys.append(gy)
        return cls(gxs, gys)


@njit(cache=True)
def _score_at(gx, gy, px, py, dx, dy, sx, sy):
    h, w = gx.shape
    n = px.shape[0]
    acc = 0.0
    for i in range(n):
        x = px[i] + sx
        y = py[i] + sy
        if x >= 0 and x < w and y >= 0 and y < h:
            acc += abs(gx[y, x] * dx[i] + gy[y, x] * dy[i])
    return acc / n


@njit(cache=True)
def _score_window(gx, gy, px, py, dx, dy, sx0, sy0, out):
    ny, nx = out.shape
    for j in range(ny):
        for i in range(nx):
            out[j, i] = _score_at(gx, gy, px, py, dx, dy, sx0 + i, sy0 + j)


def _arrays(t: Template):
    return (np.ascontiguousarray(t.pixels[:, 0], dtype=np.int64), np.ascontiguousarray(t.pixels[:, 1], dtype=np.int64),
            np.ascontiguousarray(t.directions[:, 0], dtype=np.float64),
            np.ascontiguousarray(t.directions[:, 1], dtype=np.float64))


def similarity(gradients, template: Template, anchor_position) -> float:
    """Mean |cos| between template directions and image gradient directions.

    ``gradients`` is an (gx, gy) pair of normalized gradient images at the
    template's level; ``anchor_position`` is where the template anchor lands.
    """
    gx, gy = gradients
    pts = np.floor(np.asarray(anchor_position, float) + template.offsets).astype(np.int64)
    h, w = gx.shape
    if pts.min() < 0 or pts[:, 0].max() >= w or pts[:, 1].max() >= h:
        raise OutOfBounds("template reaches outside the image")
    g = np.stack([gx[pts[:, 1], pts[:, 0]], gy[pts[:, 1], pts[:, 0]]], axis=1)
    return float(np.abs(np.einsum("ij,ij->i", g, template.directions)).mean())


def shift_score(grads: ImageGradients, template: Template, sx: int, sy: int) -> float:
    lvl = template.level
    return float(_score_at(grads.gx[lvl], grads.gy[lvl], *_arrays(template), int(sx), int(sy)))


def shift_bounds(template: Template, shape, radius_px=None):
    """Inclusive shift range keeping every point inside the image, optionally limited to +-radius."""
    h, w = shape
    px, py = template.pixels[:, 0], template.pixels[:, 1]
    lo_x, hi_x = -int(px.min()), w - 1 - int(px.max())
    lo_y, hi_y = -int(py.min()), h - 1 - int(py.max())
    if radius_px is not None:
        r = int(math.ceil(radius_px))
        lo_x, hi_x = max(lo_x, -r), min(hi_x, r)
        lo_y, hi_y = max(lo_y, -r), min(hi_y, r)
    return lo_x, hi_x, lo_y, hi_y


def score_map(grads: ImageGradients, template: Template, radius_px=None):
    """Scores over every admissible integer shift. Returns (map, sx0, sy0)."""
    lvl = template.level
    gx, gy = grads.gx[lvl], grads.gy[lvl]
    lo_x, hi_x, lo_y, hi_y = shift_bounds(template, gx.shape, radius_px)
    if hi_x < lo_x or hi_y < lo_y:
        return np.zeros((0, 0)), lo_x, lo_y
    out = np.empty((hi_y - lo_y + 1, hi_x - lo_x + 1))
    _score_window(gx, gy, *_arrays(template), lo_x, lo_y, out)
    return out, lo_x, lo_y


# ------------------------------------------------------------------ templates


def _nms_edges(cov: np.ndarray, rel_thresh: float = 0.25):
    """Thin silhouette edges of a coverage image: (points xy, unit directions, magnitude)."""
    gx = cv2.Sobel(cov, cv2.CV_64F, 1, 0, ksize=3)
    gy = cv2.Sobel(cov, cv2.CV_64F, 0, 1, ksize=3)
    mag = np.hypot(gx, gy)
    if mag.max() <= 0:
        return np.zeros((0, 2), int), np.zeros((0, 2)), np.zeros(0)
    ang = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    q = (np.round(ang / 45.0).astype(int) % 4)
    pad = np.pad(mag, 1)
    h, w = mag.shape
    nb = {0: ((0, 1), (0, -1)), 1: ((1, 1), (-1, -1)), 2: ((1, 0), (-1, 0)), 3: ((1, -1), (-1, 1))}
    keep = np.zeros_like(mag, dtype=bool)
    for k, ((dy1, dx1), (dy2, dx2)) in nb.items():
        a = pad[1 + dy1:1 + dy1 + h, 1 + dx1:1 + dx1 + w]
        b = pad[1 + dy2:1 + dy2 + h, 1 + dx2:1 + dx2 + w]
        keep |= (q == k) & (mag >= a) & (mag >= b)
    keep &= mag >= rel_thresh * mag.max()
    ys, xs = np.nonzero(keep)
    m = mag[ys, xs]
    d = np.stack([gx[ys, xs], gy[ys, xs]], axis=1) / m[:, None]
    return np.stack([xs, ys], axis=1), d, m


def _grid_subsample(pts, dirs, mag, max_points):
    """Keep at most ``max_points`` spatially spread points (strongest per grid cell)."""
    if len(pts) <= max_points:
        return pts, dirs
    cell = 1
    while True:
        cell += 1
        key = (pts[:, 1] // cell) * 100003 + (pts[:, 0] // cell)
        order = np.lexsort((-mag, key))
        first = np.ones(len(order), bool)
        first[1:] = key[order][1:] != key[order][:-1]
        sel = np.sort(order[first])
        if len(sel) <= max_points:
            return pts[sel], dirs[sel]


def finger_mask(grasp: GraspSpec, cam_T_tcp: RigidTransform, cam: PinholeCamera, margin_px: float) -> np.ndarray:
    """Level-0 mask of the finger boxes at the inspection pose, dilated by ``margin_px``."""
    fm = grasp.finger_mesh()
    v = cam_T_tcp.apply(fm.vertices)
    ids = np.full(len(fm.triangles), 1, np.int32)
    mask = render_scene(v, fm.triangles, ids, cam).instance_id != BACKGROUND
    r = int(math.ceil(margin_px))
    if r > 0 and mask.any():
        k = cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (2 * r + 1, 2 * r + 1))
        mask = cv2.dilate(mask.astype(np.uint8), k) > 0
    return mask


def theta_grid(range_deg: float, step_deg: float) -> np.ndarray:
    n = int(round(2 * range_deg / step_deg))
    return np.radians(np.linspace(-range_deg, range_deg, n + 1))


def _render_window(mesh, ts: TemplateSet, thetas, align: int):
    """Level-0 pixel window holding the object at every angle, aligned to ``align``."""
    boxes = []
    for th in (thetas[0], 0.0, thetas[-1]):
        boxes.append(projected_bbox(ts.object_pose(th).apply(mesh.vertices), ts.cam, pad=8))
    x0 = min(b[0] for b in boxes) // align * align
    y0 = min(b[1] for b in boxes) // align * align
    x1 = max(b[0] + b[2] for b in boxes)
    y1 = max(b[1] + b[3] for b in boxes)
    w = -(-(x1 - x0) // align) * align
    h = -(-(y1 - y0) // align) * align
    return x0, y0, w, h


def generate_templates(mesh, grasp: GraspSpec, cam_T_tcp: RigidTransform, cam: PinholeCamera,
                       config: MatchConfig | None = None, instances=None) -> TemplateSet:
    """Render silhouette templates for every angle and pyramid level.

    Level 0 is the full resolution. The angular step doubles per level from
    ``coarse_step / 2**(levels-1)`` at level 0 to ``coarse_step`` at the top.
    Levels whose templates fall below ``min_coarse_points`` edge points are
    dropped, so small parts get a shallower pyramid.
    """
    cfg = config or MatchConfig()
    L = cfg.levels
    fine_step = cfg.coarse_step_deg / 2 ** (L - 1)
    fine_thetas = theta_grid(cfg.range_deg, fine_step)
    tcp_T_obj = grasp.tcp_T_obj
    depth = float((cam_T_tcp @ tcp_T_obj).translation[2])
    margin_px = cfg.finger_margin_mm * 1e-3 * cam.focal_length / depth
    mask0 = finger_mask(grasp, cam_T_tcp, cam, margin_px)
    ts = TemplateSet(L, [], [], depth, cam, cam_T_tcp, tcp_T_obj, grasp.normal.copy(), mask0, cfg.g_min,
                     {"version": TEMPLATE_VERSION, "fine_step_deg": fine_step, "range_deg": cfg.range_deg,
                      "finger_margin_px": margin_px})
    align = 2 ** L
    x0, y0, w, h = _render_window(mesh, ts, fine_thetas, align)
    big = cam.scaled(SUPERSAMPLE)
    ids = np.ones(len(mesh.triangles), np.int32)
    win2 = (x0 * SUPERSAMPLE, y0 * SUPERSAMPLE, w * SUPERSAMPLE, h * SUPERSAMPLE)

    coverage = []
    anchors = []
    for th in fine_thetas:
        pose = ts.object_pose(th)
        buf = render_scene(pose.apply(mesh.vertices), mesh.triangles, ids, big, window=win2)
        coverage.append((buf.instance_id != BACKGROUND).astype(np.float64))
        anchors.append(cam.project(pose.translation))

    step_idx = [2 ** lvl for lvl in range(L)]
    for lvl in range(L):
        f = 2 ** lvl
        mask_l = block_mean(mask0.astype(np.float64), f) > 0
        idx = np.arange(0, len(fine_thetas), step_idx[lvl])
        tl, thetas = [], []
        for k in idx:
            cov = block_mean(coverage[k], SUPERSAMPLE * f)
            pts, dirs, mag = _nms_edges(cov)
            pts = pts + np.array([x0 // f, y0 // f])
            inside = (pts[:, 0] < mask_l.shape[1]) & (pts[:, 1] < mask_l.shape[0])
            pts, dirs, mag = pts[inside], dirs[inside], mag[inside]
            free = ~mask_l[pts[:, 1], pts[:, 0]]
            pts, dirs, mag = pts[free], dirs[free], mag[free]
            pts, dirs = _grid_subsample(pts, dirs, mag, cfg.max_points)
            if lvl == 0 and len(pts) < cfg.min_points:
                raise TooFewEdges(f"template at {math.degrees(fine_thetas[k]):.1f} deg has {len(pts)} edge points")
            tl.append(Template(float(fine_thetas[k]), lvl, pts.astype(np.int32), dirs, anchors[k] / f))
            thetas.append(float(fine_thetas[k]))
        if lvl > 0 and min(len(t) for t in tl) < cfg.min_coarse_points:
            break
        ts.templates.append(tl)
        ts.thetas.append(np.asarray(thetas))
    ts.levels = len(ts.templates)
    return ts


# ------------------------------------------------------------------ search


def _radius_px(ts: TemplateSet, cfg: MatchConfig, level: int):
    if cfg.search_radius_mm is None:
        return None
    return cfg.search_radius_mm * 1e-3 * ts.cam.focal_length / ts.grasp_plane_depth / 2 ** level


def lift_to_3d(pose2d: Pose2D, ts: TemplateSet, cam: PinholeCamera | None = None) -> RigidTransform:
    """Object pose whose origin projects to (x, y) and lies in the grasp plane.

    The grasp plane passes through the nominal object origin with the
    grasp normal; for a fronto-parallel view this is ``Z = grasp_plane_depth``.
    """
    cam = cam or ts.cam
    nominal = ts.cam_T_obj_nominal
    p0 = nominal.translation
    n = ts.normal_cam
    ray = np.array([(pose2d.x - cam.cx) / cam.focal_length, (pose2d.y - cam.cy) / cam.focal_length, 1.0])
    denom = n @ ray
    if abs(denom) < 1e-9:
        raise ValueError("viewing ray parallel to the grasp plane")
    origin = ray * (n @ p0) / denom
    if abs(n[2]) > 1 - 1e-12:
        origin[2] = ts.grasp_plane_depth
    R = axis_angle_matrix(n, pose2d.theta) @ nominal.rotation
    return RigidTransform(R, origin)


def _local_peaks(stack, threshold, limit):
    peaks = (stack == maximum_filter(stack, size=3, mode="constant", cval=-1.0)) & (stack >= threshold)
    idx = np.argwhere(peaks)
    if len(idx) == 0:
        return []
    scores = stack[peaks]
    order = np.argsort(-scores, kind="stable")[:limit]
    return [tuple(int(v) for v in idx[o]) + (float(scores[o]),) for o in order]


def _coarse_search(grads, ts, cfg):
    top = ts.levels - 1
    r = _radius_px(ts, cfg, top)
    maps, origins = [], []
    for t in ts.templates[top]:
        m, sx0, sy0 = score_map(grads, t, r)
        maps.append(m)
        origins.append((sx0, sy0))
    if any(m.size == 0 for m in maps):
        return []
    # shift ranges differ per angle; embed in a common frame
    lo_x = min(o[0] for o in origins)
    lo_y = min(o[1] for o in origins)
    hi_x = max(o[0] + m.shape[1] for o, m in zip(origins, maps))
    hi_y = max(o[1] + m.shape[0] for o, m in zip(origins, maps))
    stack = np.full((len(maps), hi_y - lo_y, hi_x - lo_x), -1.0)
    for k, (m, (sx0, sy0)) in enumerate(zip(maps, origins)):
        stack[k, sy0 - lo_y:sy0 - lo_y + m.shape[0], sx0 - lo_x:sx0 - lo_x + m.shape[1]] = m
    peaks = _local_peaks(stack, cfg.s_min_coarse, cfg.beam)
    return [(k, sx + lo_x, sy + lo_y, s) for k, sy, sx, s in peaks]


def _descend(grads, ts, cfg, cands, level):
    """Refine parent candidates from ``level + 1`` into ``level``."""
    tl = ts.templates[level]
    r = _radius_px(ts, cfg, level)
    best = {}
    for k_parent, sx_p, sy_p, _ in cands:
        k_center = 2 * k_parent
        top = None
        for k in (k_center - 1, k_center, k_center + 1):
            if not 0 <= k < len(tl):
                continue
            t = tl[k]
            lo_x, hi_x, lo_y, hi_y = shift_bounds(t, grads.gx[level].shape, r)
            for sy in range(2 * sy_p - 2, 2 * sy_p + 3):
                for sx in range(2 * sx_p - 2, 2 * sx_p + 3):
                    if not (lo_x <= sx <= hi_x and lo_y <= sy <= hi_y):
                        continue
                    s = shift_score(grads, t, sx, sy)
                    if top is None or s > top[3]:
                        top = (k, sx, sy, s)
        if top is not None:
            key = top[:3]
            if key not in best or best[key][3] < top[3]:
                best[key] = top
    return sorted(best.values(), key=lambda c: -c[3])[:cfg.beam]


def _climb(grads, ts, cand, radius_px, reach: int = 2, max_steps: int = 100):
    """Greedy ascent at the finest level over (angle, shift) cells within ``reach`` steps.

    A reach of two follows the diagonal ridges that long thin edges leave
    between neighboring angles and shifts.
    """
    tl = ts.templates[0]
    k, sx, sy, s = cand
    span = range(-reach, reach + 1)
    for _ in range(max_steps):
        top = (k, sx, sy, s)
        for kk in range(k - reach, k + reach + 1):
            if not 0 <= kk < len(tl):
                continue
            lo_x, hi_x, lo_y, hi_y = shift_bounds(tl[kk], grads.gx[0].shape, radius_px)
            for dy in span:
                for dx in span:
                    xx, yy = sx + dx, sy + dy
                    if (kk, xx, yy) == (k, sx, sy) or not (lo_x <= xx <= hi_x and lo_y <= yy <= hi_y):
                        continue
                    v = shift_score(grads, tl[kk], xx, yy)
                    if v > top[3]:
                        top = (kk, xx, yy, v)
        if top[:3] == (k, sx, sy):
            break
        k, sx, sy, s = top
    return k, sx, sy, s


def _origin(ts, k, sx, sy):
    t = ts.templates[0][k]
    return t.anchor + np.array([sx, sy], dtype=np.float64)


def _quadratic_peak(grads, ts, best, radius):
    """Peak of a quadratic fitted to scores on a (2r+1)^3 stencil, or None."""
    k, sx, sy, _ = best
    tl = ts.templates[0]
    if k - radius < 0 or k + radius >= len(tl):
        return None
    o = _origin(ts, k, sx, sy)
    span = range(-radius, radius + 1)
    rows, vals = [], []
    for dk in span:
        for dy in span:
            for dx in span:
                u, v = _origin(ts, k + dk, sx + dx, sy + dy) - o
                w = float(dk)
                rows.append([u * u, v * v, w * w, u * v, u * w, v * w, u, v, w, 1.0])
                vals.append(shift_score(grads, tl[k + dk], sx + dx, sy + dy))
    coef, *_ = np.linalg.lstsq(np.asarray(rows), np.asarray(vals), rcond=None)
    a, b, c, d, e, f, g, h, i, _ = coef
    H = np.array([[2 * a, d, e], [d, 2 * b, f], [e, f, 2 * c]])
    if np.any(np.linalg.eigvalsh(H) >= -1e-9):
        return None
    peak = -np.linalg.solve(H, np.array([g, h, i]))
    if np.any(np.abs(peak) > radius):
        return None
    step = tl[1].theta - tl[0].theta
    return Pose2D(float(o[0] + peak[0]), float(o[1] + peak[1]), tl[k].theta + peak[2] * step)


def _translation_peak(grads, ts, best):
    """Sub-pixel shift from a 2D quadratic over the 3x3 shifts at the discrete angle, or None."""
    k, sx, sy, _ = best
    t = ts.templates[0][k]
    rows, vals = [], []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            rows.append([dx * dx, dy * dy, dx * dy, dx, dy, 1.0])
            vals.append(shift_score(grads, t, sx + dx, sy + dy))
    coef, *_ = np.linalg.lstsq(np.asarray(rows, float), np.asarray(vals), rcond=None)
    a, b, c, d, e, _ = coef
    H = np.array([[2 * a, c], [c, 2 * b]])
    if np.any(np.linalg.eigvalsh(H) >= -1e-9):
        return None
    peak = -np.linalg.solve(H, np.array([d, e]))
    if np.any(np.abs(peak) > 1.0):
        return None
    o = _origin(ts, k, sx, sy) + peak
    return Pose2D(float(o[0]), float(o[1]), t.theta)


def _plateau_center(grads, ts, best, radius=2, delta=0.02):
    """Mean (origin, theta) of stencil samples scoring within ``delta`` of the stencil maximum."""
    k, sx, sy, _ = best
    tl = ts.templates[0]
    if k - radius < 0 or k + radius >= len(tl):
        return None
    span = range(-radius, radius + 1)
    pts, vals = [], []
    for dk in span:
        for dy in span:
            for dx in span:
                o = _origin(ts, k + dk, sx + dx, sy + dy)
                pts.append((o[0], o[1], tl[k + dk].theta))
                vals.append(shift_score(grads, tl[k + dk], sx + dx, sy + dy))
    pts, vals = np.asarray(pts), np.asarray(vals)
    x, y, th = pts[vals >= vals.max() - delta].mean(axis=0)
    return Pose2D(float(x), float(y), float(th))


def refine(grads: ImageGradients, ts: TemplateSet, best, plateau_delta: float = 0.02) -> tuple[Pose2D, bool]:
    """Quadratic fit of the score around the finest discrete optimum.

    The fit runs in (origin x, origin y, theta) over the 3x3x3 neighborhood
    so that the anchor motion with theta is accounted for. When that fit is
    not a concave peak (thin parallel edges leave a flat ridge along a
    coupled shift and turn) the estimate is the center of the near-maximal
    plateau in the 5x5x5 neighborhood. At the ends of the angle range only
    the shift is refined. Falls back to the discrete optimum otherwise.
    """
    pose = _quadratic_peak(grads, ts, best, 1)
    if pose is None:
        pose = _plateau_center(grads, ts, best, 2, plateau_delta)
    if pose is None:
        pose = _translation_peak(grads, ts, best)
    if pose is not None:
        return pose, True
    k, sx, sy, _ = best
    o = _origin(ts, k, sx, sy)
    return Pose2D(float(o[0]), float(o[1]), ts.templates[0][k].theta), False


def match(image, ts: TemplateSet, config: MatchConfig | None = None, grads: ImageGradients | None = None) -> MatchResult:
    """Coarse-to-fine search for the best (shift, angle) followed by refinement."""
    cfg = config or MatchConfig()
    img = np.asarray(image)
    if img.shape[:2] != (ts.cam.height, ts.cam.width):
        raise SizeMismatch(f"image {img.shape[:2]} does not match camera {(ts.cam.height, ts.cam.width)}")
    if grads is None:
        grads = ImageGradients.build(img, ts.levels, ts.g_min)
    cands = _coarse_search(grads, ts, cfg)
    level_scores = [max((c[3] for c in cands), default=0.0)]
    if not cands:
        raise NoMatch("no candidate above the coarse threshold")
    for level in range(ts.levels - 2, -1, -1):
        cands = _descend(grads, ts, cfg, cands, level)
        thr = cfg.s_min_fine if level == 0 else cfg.s_min_coarse
        cands = [c for c in cands if c[3] >= thr]
        level_scores.append(max((c[3] for c in cands), default=0.0))
        if not cands:
            raise NoMatch(f"no candidate above threshold at pyramid level {level}")
    if cfg.climb:
        r0 = _radius_px(ts, cfg, 0)
        cands = sorted((_climb(grads, ts, c, r0) for c in cands), key=lambda c: -c[3])
        level_scores[-1] = cands[0][3]
    best = cands[0]
    if cfg.refine:
        pose, refined = refine(grads, ts, best, cfg.plateau_delta)
    else:
        o = _origin(ts, best[0], best[1], best[2])
        pose, refined = Pose2D(float(o[0]), float(o[1]), ts.templates[0][best[0]].theta), False
    return MatchResult(pose, float(best[3]), lift_to_3d(pose, ts), level_scores, refined)


# ------------------------------------------------------------------ persistence


def save_templates(path, ts: TemplateSet) -> None:
    arrays = {"finger_mask": np.packbits(ts.finger_mask)}
    meta = {
        "version": TEMPLATE_VERSION,
        "levels": ts.levels,
        "grasp_plane_depth": ts.grasp_plane_depth,
        "camera": ts.cam.to_dict(),
        "cam_T_tcp": ts.cam_T_tcp.matrix().tolist(),
        "tcp_T_obj": ts.tcp_T_obj.matrix().tolist(),
        "plane_normal": ts.plane_normal.tolist(),
        "mask_shape": list(ts.finger_mask.shape),
        "g_min": ts.g_min,
        "extra": ts.meta,
        "counts": [len(tl) for tl in ts.templates],
    }
    for lvl, tl in enumerate(ts.templates):
        for k, t in enumerate(tl):
            pre = f"l{lvl}_{k}_"
            arrays[pre + "pix"] = t.pixels
            arrays[pre + "dir"] = t.directions
            arrays[pre + "hdr"] = np.array([t.theta, t.anchor[0], t.anchor[1]])
    buf = io.BytesIO()
    np.savez_compressed(buf, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_templates(path) -> TemplateSet:
    from .geometry import transform_from_doc

    try:
        z = np.load(str(path))
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != TEMPLATE_VERSION:
            raise ArtifactError(f"unsupported template version {meta.get('version')}")
        shape = tuple(meta["mask_shape"])
        mask = np.unpackbits(z["finger_mask"])[: shape[0] * shape[1]].reshape(shape).astype(bool)
        templates, thetas = [], []
        for lvl, n in enumerate(meta["counts"]):
            tl = []
            for k in range(n):
                pre = f"l{lvl}_{k}_"
                hdr = z[pre + "hdr"]
                tl.append(Template(float(hdr[0]), lvl, z[pre + "pix"], z[pre + "dir"], hdr[1:3].copy()))
            templates.append(tl)
            thetas.append(np.array([t.theta for t in tl]))
        return TemplateSet(int(meta["levels"]), thetas, templates, float(meta["grasp_plane_depth"]),
                           PinholeCamera.from_dict(meta["camera"]), transform_from_doc(meta["cam_T_tcp"]),
                           transform_from_doc(meta["tcp_T_obj"]), np.asarray(meta["plane_normal"]), mask,
                           float(meta["g_min"]), meta.get("extra", {}))
    except ArtifactError:
        raise
    except Exception as exc:
        raise ArtifactError(f"cannot load templates from {path}: {exc}") from exc


def overlay(image, ts: TemplateSet, result: MatchResult) -> np.ndarray:
    """Color image with the nearest-angle finest template drawn at the estimated pose."""
    img = cv2.cvtColor(np.clip(image, 0, 255).astype(np.uint8), cv2.COLOR_GRAY2BGR)
    k = int(np.argmin(np.abs(np.asarray(ts.thetas[0]) - result.pose2d.theta)))
    pts = ts.templates[0][k].offsets + np.array([result.pose2d.x, result.pose2d.y])
    h, w = img.shape[:2]
    ij = np.floor(pts).astype(int)
    keep = (ij[:, 0] >= 0) & (ij[:, 0] < w) & (ij[:, 1] >= 0) & (ij[:, 1] < h)
    img[ts.finger_mask] = (img[ts.finger_mask] * 0.6 + np.array([0, 0, 100])).astype(np.uint8)
    for x, y in ij[keep]:
        cv2.circle(img, (int(x), int(y)), 1, (0, 200, 0), -1)
    return img
