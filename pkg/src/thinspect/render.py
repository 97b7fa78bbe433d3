"""Z-buffered software rasterizer for depth, instance-id and shaded buffers.

Instance ids: 0 background, 1 body, ``pin.id + 1`` for pins (pin ids start at
1), -1 for gripper fingers. Pixel ``(i, j)`` is sampled at its center
``(i + 0.5, j + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from numba import njit

from .errors import BehindCamera, PinNotVisible
from .geometry import PinholeCamera, RigidTransform

BACKGROUND = 0
BODY_ID = 1
FINGER_ID = -1
NEAR_PLANE = 1e-4
AMBIENT = 0.25


@dataclass
class RenderBuffers:
    depth: np.ndarray
    instance_id: np.ndarray
    intensity: np.ndarray | None = None
    origin: tuple[int, int] = (0, 0)

    @property
    def shape(self):
        return self.depth.shape


@njit(cache=True)
def _raster_kernel(verts, tris, f, cx, cy, width, height, depth, tri_index):
    nt = tris.shape[0]
    for t in range(nt):
        a, b, c = tris[t, 0], tris[t, 1], tris[t, 2]
        za, zb, zc = verts[a, 2], verts[b, 2], verts[c, 2]
        xa = verts[a, 0] * f / za + cx
        ya = verts[a, 1] * f / za + cy
        xb = verts[b, 0] * f / zb + cx
        yb = verts[b, 1] * f / zb + cy
        xc = verts[c, 0] * f / zc + cx
        yc = verts[c, 1] * f / zc + cy
        area = (xb - xa) * (yc - ya) - (yb - ya) * (xc - xa)
        if area == 0.0:
            continue
        x0 = max(int(np.floor(min(xa, xb, xc) - 0.5)), 0)
        x1 = min(int(np.ceil(max(xa, xb, xc) - 0.5)), width - 1)
        y0 = max(int(np.floor(min(ya, yb, yc) - 0.5)), 0)
        y1 = min(int(np.ceil(max(ya, yb, yc) - 0.5)), height - 1)
        inv_area = 1.0 / area
        for j in range(y0, y1 + 1):
            py = j + 0.5
            for i in range(x0, x1 + 1):
                px = i + 0.5
                w0 = ((xc - xb) * (py - yb) - (yc - yb) * (px - xb)) * inv_area
                w1 = ((xa - xc) * (py - yc) - (ya - yc) * (px - xc)) * inv_area
                w2 = ((xb - xa) * (py - ya) - (yb - ya) * (px - xa)) * inv_area
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                inv_z = w0 / za + w1 / zb + w2 / zc
                z = 1.0 / inv_z
                if z < depth[j, i]:
                    depth[j, i] = z
                    tri_index[j, i] = t


def _check_front(vertices):
    if len(vertices) and vertices[:, 2].min() <= NEAR_PLANE:
        raise BehindCamera("geometry reaches behind the camera near plane")


def projected_bbox(vertices_cam, cam: PinholeCamera, pad: int = 2):
    """Integer pixel window ``(x0, y0, w, h)`` covering the projection, clipped to the image."""
    _check_front(vertices_cam)
    uv = cam.project(vertices_cam)
    x0 = max(int(np.floor(uv[:, 0].min())) - pad, 0)
    y0 = max(int(np.floor(uv[:, 1].min())) - pad, 0)
    x1 = min(int(np.ceil(uv[:, 0].max())) + pad, cam.width)
    y1 = min(int(np.ceil(uv[:, 1].max())) + pad, cam.height)
    return x0, y0, max(x1 - x0, 0), max(y1 - y0, 0)


def raster_triangles(vertices_cam, triangles, cam: PinholeCamera):
    """Raw z-buffer pass. Returns (depth, winning triangle index or -1)."""
    v = np.ascontiguousarray(vertices_cam, dtype=np.float64)
    t = np.ascontiguousarray(triangles, dtype=np.int64)
    _check_front(v)
    depth = np.full((cam.height, cam.width), np.inf)
    tri_index = np.full((cam.height, cam.width), -1, dtype=np.int64)
    if len(t):
        _raster_kernel(v, t, float(cam.focal_length), float(cam.cx), float(cam.cy),
                       cam.width, cam.height, depth, tri_index)
    return depth, tri_index


def shade(tri_index, face_normals_cam, albedo, cam: PinholeCamera, background: float):
    """Lambert shading under a headlight at the camera center (two-sided)."""
    h, w = tri_index.shape
    out = np.full((h, w), float(background))
    hit = tri_index >= 0
    if not hit.any():
        return out
    jj, ii = np.nonzero(hit)
    ray = np.stack([(ii + 0.5 - cam.cx) / cam.focal_length,
                    (jj + 0.5 - cam.cy) / cam.focal_length,
                    np.ones(len(ii))], axis=1)
    ray /= np.linalg.norm(ray, axis=1, keepdims=True)
    t = tri_index[hit]
    lam = np.abs(np.einsum("ij,ij->i", face_normals_cam[t], ray))
    out[hit] = albedo[t] * (AMBIENT + (1.0 - AMBIENT) * lam)
    return out


def _face_normals(v, t):
    n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0, norm, 1.0)


def render_scene(vertices_cam, triangles, tri_ids, cam: PinholeCamera, albedo=None,
                 supersample: int = 1, background: float = 230.0, window=None) -> RenderBuffers:
    """Rasterize a camera-frame triangle soup with per-triangle ids.

    ``window`` limits rendering to a pixel rectangle ``(x0, y0, w, h)``; the
    returned buffers then cover only that window and record its origin.
    """
    v = np.asarray(vertices_cam, dtype=np.float64)
    t = np.asarray(triangles, dtype=np.int64)
    tri_ids = np.asarray(tri_ids, dtype=np.int32)
    x0, y0 = 0, 0
    sub = cam
    if window is not None:
        x0, y0, w, h = window
        sub = cam.crop(x0, y0, w, h)
    depth, tri_index = raster_triangles(v, t, sub)
    ids = np.where(tri_index >= 0, tri_ids[np.maximum(tri_index, 0)], BACKGROUND).astype(np.int32)
    intensity = None
    if albedo is not None:
        albedo = np.asarray(albedo, dtype=np.float64)
        normals = _face_normals(v, t)
        if supersample > 1:
            big = sub.scaled(supersample)
            _, ti2 = raster_triangles(v, t, big)
            img = shade(ti2, normals, albedo, big, background)
            s = supersample
            intensity = img.reshape(sub.height, s, sub.width, s).mean(axis=(1, 3))
        else:
            intensity = shade(tri_index, normals, albedo, sub, background)
    return RenderBuffers(depth, ids, intensity, (x0, y0))


def object_tri_ids(mesh, instances) -> np.ndarray:
    """Per-triangle instance id: a triangle belongs to a pin when at least two of its vertices do."""
    vid = np.full(len(mesh.vertices), BODY_ID, dtype=np.int32)
    for pin in instances:
        vid[np.fromiter(pin.vertex_ids, dtype=np.int64)] = pin.id + 1
    tv = vid[mesh.triangles]
    out = np.full(len(tv), BODY_ID, dtype=np.int32)
    for k in range(3):
        a, b = tv[:, k], tv[:, (k + 1) % 3]
        same = (a == b) & (a != BODY_ID)
        out[same] = a[same]
    return out


def rasterize(mesh, instances, pose: RigidTransform, cam: PinholeCamera, shaded: bool = True,
              supersample: int = 1) -> RenderBuffers:
    """Render ``mesh`` placed by ``pose`` (cam_T_obj) into full-size buffers."""
    v = pose.apply(mesh.vertices)
    _check_front(v)
    ids = object_tri_ids(mesh, instances)
    albedo = np.full(len(ids), 200.0) if shaded else None
    return render_scene(v, mesh.triangles, ids, cam, albedo, supersample)


class SceneRenderer:
    """Caches the posed geometry of one object so per-pin queries stay cheap."""

    def __init__(self, mesh, instances, pose: RigidTransform, cam: PinholeCamera, ids=None):
        self.cam = cam
        self.v = pose.apply(mesh.vertices)
        _check_front(self.v)
        self.tris = mesh.triangles
        self.ids = object_tri_ids(mesh, instances) if ids is None else ids
        self.pin_ids = [p.id for p in instances]
        self.window = projected_bbox(self.v, cam)
        self._full = None
        self._body = None
        self._alone = {}

    def _render(self, mask) -> np.ndarray:
        if self.window[2] == 0 or self.window[3] == 0:
            return np.zeros((0, 0), np.int32)
        buf = render_scene(self.v, self.tris[mask], self.ids[mask], self.cam, window=self.window)
        return buf.instance_id

    @property
    def full(self) -> np.ndarray:
        if self._full is None:
            self._full = self._render(np.ones(len(self.tris), bool))
        return self._full

    def alone(self, pin_id) -> np.ndarray:
        """Coverage of the pin rendered without any other geometry."""
        if pin_id not in self._alone:
            self._alone[pin_id] = self._render(self.ids == pin_id + 1) != BACKGROUND
        return self._alone[pin_id]

    def others(self, pin_id) -> np.ndarray:
        """Coverage of the object with this pin removed."""
        if self._body is None:
            self._body = self._render(self.ids == BODY_ID) != BACKGROUND
        cov = self._body.copy()
        for q in self.pin_ids:
            if q != pin_id:
                cov |= self.alone(q)
        return cov

    def visibility(self, pin_id) -> float:
        n = int(self.alone(pin_id).sum())
        if n == 0:
            raise PinNotVisible(f"pin {pin_id} does not project into the image")
        return float((self.full == pin_id + 1).sum()) / n

    def over_body(self, pin_id) -> float:
        # where the pin is the nearest surface, any other coverage lies behind it
        vis = self.full == pin_id + 1
        if not vis.any():
            if not self.alone(pin_id).any():
                raise PinNotVisible(f"pin {pin_id} does not project into the image")
            return 0.0
        return float(self.others(pin_id)[vis].sum()) / float(vis.sum())


def _find_pin(instances, pin_id):
    if not any(p.id == pin_id for p in instances):
        raise PinNotVisible(f"no pin with id {pin_id}")


def pin_visibility(mesh, instances, pin_id, pose, cam) -> float:
    """Visible fraction of the pin's solo silhouette in the full-object render."""
    _find_pin(instances, pin_id)
    return SceneRenderer(mesh, instances, pose, cam).visibility(pin_id)


def pin_over_body(mesh, instances, pin_id, pose, cam) -> float:
    """Fraction of the pin's visible pixels that have other object geometry behind them."""
    _find_pin(instances, pin_id)
    return SceneRenderer(mesh, instances, pose, cam).over_body(pin_id)


def save_png(path, buffers: RenderBuffers, which: str = "intensity") -> None:
    """Write a buffer as PNG: intensity 8-bit, depth in 1/10 mm and ids as 16-bit."""
    if which == "intensity":
        img = np.clip(np.rint(buffers.intensity), 0, 255).astype(np.uint8)
    elif which == "depth":
        d = np.where(np.isfinite(buffers.depth), buffers.depth * 1e4, 0)
        img = np.clip(d, 0, 65535).astype(np.uint16)
    elif which == "instance_id":
        img = np.where(buffers.instance_id < 0, 65535, buffers.instance_id).astype(np.uint16)
    else:
        raise ValueError(f"unknown buffer {which!r}")
    if not cv2.imwrite(str(path), img):
        raise OSError(f"could not write {path}")
