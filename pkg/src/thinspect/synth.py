"""Procedural through-hole parts, bent-pin perturbation and grasp-scene images.

Three families stand in for the physical test objects: a square-pin header
row, a two-row D-sub-like connector with mounting studs and an LED with a
domed lens and thin tinned legs. All lengths are meters. Every part is built
in its own object frame with the contact pins pointing along +Z from the
plane Z = 0; the TCP sits inside the gripped body with axes parallel to the
object frame and the finger pads on the +-X faces.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import InvalidSpec, UnknownPin
from .geometry import PinholeCamera, RigidTransform, axis_angle_matrix
from .model import BODY, PIN, GraspSpec, TriMesh, clean_mesh
from .pinseg import PinInstance
from . import render as R
from .render import FINGER_ID, RenderBuffers

FAMILIES = ("header_grid", "dsub_like", "led_like")
MM = 1e-3
BACKGROUND_LEVEL = 230.0
FINGER_MATERIAL = (40.0, 1.0)


@dataclass
class ComponentSpec:
    """Parametric through-hole part. Lengths in meters.

    ``body`` is (x, y, z) extent of the main body below Z = 0. Pins are laid
    out as ``rows`` x ``cols`` along Y with ``pitch``; rows are ``row_spacing``
    apart along X and odd rows shift by ``stagger`` along Y.
    """

    family: str = "header_grid"
    body: tuple = (2.5 * MM, 22.86 * MM, 2.5 * MM)
    rows: int = 1
    cols: int = 9
    pitch: float = 2.54 * MM
    row_spacing: float = 0.0
    stagger: float = 0.0
    row_cols: tuple | None = None
    pin_shape: str = "square"
    pin_diameter: float = 0.64 * MM
    pin_length: float = 3.0 * MM
    hole_diameter: float = 1.2 * MM
    flange: tuple | None = None
    studs: int = 0
    stud_diameter: float = 1.0 * MM
    stud_length: float = 4.0 * MM
    grid_step: float = 0.3 * MM
    pin_rings: int = 12
    pin_segments: int = 12
    finger_width: float = 6.0 * MM
    seed: int = 0

    def validate(self):
        if self.family not in FAMILIES:
            raise InvalidSpec(f"unknown family {self.family!r}")
        if self.pin_shape not in ("square", "cylinder"):
            raise InvalidSpec(f"unknown pin shape {self.pin_shape!r}")
        if self.rows < 0 or self.cols < 0:
            raise InvalidSpec("pin layout counts must be non-negative")
        if min(self.body) <= 0 or self.pin_length <= 0 or self.pin_diameter <= 0:
            raise InvalidSpec("dimensions must be positive")
        if self.rows * self.cols > 1 and self.pitch <= self.pin_diameter:
            raise InvalidSpec("pitch must exceed the pin diameter")
        if self.hole_diameter <= self.pin_diameter:
            raise InvalidSpec("hole must be wider than the pin")

    @property
    def pin_radius(self) -> float:
        """Radius of the circle enclosing the pin cross-section."""
        r = self.pin_diameter / 2.0
        return r * math.sqrt(2.0) if self.pin_shape == "square" else r

    @property
    def clearance(self) -> float:
        """Radial play of a pin inside its hole."""
        return self.hole_diameter / 2.0 - self.pin_radius

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> ComponentSpec:
        d = dict(d)
        for k in ("body", "flange", "row_cols"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        try:
            spec = cls(**d)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from exc
        spec.validate()
        return spec


def default_spec(family: str, **overrides) -> ComponentSpec:
    if family == "header_grid":
        spec = ComponentSpec()
    elif family == "dsub_like":
        spec = ComponentSpec(
            family="dsub_like", body=(8.0 * MM, 18.0 * MM, 6.0 * MM), rows=2, cols=5,
            row_cols=(5, 4), pitch=2.77 * MM, row_spacing=2.84 * MM, stagger=1.385 * MM,
            pin_shape="cylinder", pin_diameter=0.8 * MM, pin_length=4.0 * MM,
            hole_diameter=1.1 * MM, flange=(12.5 * MM, 31.0 * MM, 1.5 * MM), studs=2,
            finger_width=8.0 * MM, grid_step=0.5 * MM,
        )
    elif family == "led_like":
        spec = ComponentSpec(
            family="led_like", body=(5.0 * MM, 5.0 * MM, 6.0 * MM), rows=1, cols=2,
            pitch=2.54 * MM, pin_shape="cylinder", pin_diameter=0.45 * MM,
            pin_length=8.0 * MM, hole_diameter=0.9 * MM, flange=(5.8 * MM, 5.8 * MM, 1.5 * MM),
            finger_width=4.0 * MM, pin_rings=24,
        )
    else:
        raise InvalidSpec(f"unknown family {family!r}")
    for k, v in overrides.items():
        if not hasattr(spec, k):
            raise InvalidSpec(f"unknown spec field {k!r}")
        setattr(spec, k, v)
    spec.validate()
    return spec


# ------------------------------------------------------------------ primitives


def _orient_outward(v, t):
    """Flip a closed shell so that its signed volume is positive."""
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    vol = np.einsum("ij,ij->i", a, np.cross(b, c)).sum()
    return t[:, ::-1].copy() if vol < 0 else t


def grid_box(lo, hi, step) -> TriMesh:
    """Closed box with every face split into a grid of roughly ``step`` cells."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    ctr = (lo + hi) / 2
    axes = [np.linspace(lo[i], hi[i], max(int(math.ceil((hi[i] - lo[i]) / step)), 1) + 1) for i in range(3)]
    verts, tris = [], []
    for ax in range(3):
        u, w = [i for i in range(3) if i != ax]
        for side in (lo[ax], hi[ax]):
            gu, gw = np.meshgrid(axes[u], axes[w], indexing="ij")
            p = np.zeros(gu.shape + (3,))
            p[..., ax] = side
            p[..., u] = gu
            p[..., w] = gw
            nu, nw = gu.shape
            base = sum(len(x) for x in verts)
            verts.append(p.reshape(-1, 3))
            idx = np.arange(nu * nw).reshape(nu, nw) + base
            q0, q1, q2, q3 = idx[:-1, :-1], idx[1:, :-1], idx[1:, 1:], idx[:-1, 1:]
            f = np.concatenate([np.stack([q0, q1, q2], -1).reshape(-1, 3),
                                np.stack([q0, q2, q3], -1).reshape(-1, 3)])
            tris.append(f)
    v = np.concatenate(verts)
    t = np.concatenate(tris)
    # convex: orient each face away from the center
    n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    flip = np.einsum("ij,ij->i", n, v[t].mean(axis=1) - ctr) < 0
    t[flip] = t[flip][:, ::-1]
    return clean_mesh(v, t)


def revolve(profile, n_seg, origin=(0, 0, 0)) -> TriMesh:
    """Closed surface of revolution about +Z.

    ``profile`` is a list of (r, z) from one pole (r = 0) to the other.
    """
    prof = np.asarray(profile, dtype=np.float64)
    if prof[0, 0] != 0 or prof[-1, 0] != 0:
        raise ValueError("profile must start and end on the axis")
    ang = np.linspace(0, 2 * math.pi, n_seg, endpoint=False)
    cs, sn = np.cos(ang), np.sin(ang)
    verts, ring_idx = [], []
    for r, z in prof:
        start = len(verts)
        if r == 0:
            verts.append((0.0, 0.0, z))
            ring_idx.append(np.array([start]))
        else:
            verts.extend(zip(r * cs, r * sn, np.full(n_seg, z)))
            ring_idx.append(np.arange(start, start + n_seg))
    tris = []
    for a, b in zip(ring_idx[:-1], ring_idx[1:]):
        if len(a) == 1 and len(b) == 1:
            continue
        if len(a) == 1:
            for k in range(n_seg):
                tris.append((a[0], b[k], b[(k + 1) % n_seg]))
        elif len(b) == 1:
            for k in range(n_seg):
                tris.append((a[k], b[0], a[(k + 1) % n_seg]))
        else:
            for k in range(n_seg):
                k1 = (k + 1) % n_seg
                tris.append((a[k], b[k], b[k1]))
                tris.append((a[k], b[k1], a[k1]))
    v = np.asarray(verts) + np.asarray(origin, float)
    t = np.asarray(tris, dtype=np.int64)
    return clean_mesh(v, _orient_outward(v - np.asarray(origin, float), t))


def prism(polygon, z0, z1, rings, origin=(0, 0, 0)) -> TriMesh:
    """Closed prism along +Z over a convex polygon, with ``rings`` side subdivisions and fan caps."""
    poly = np.asarray(polygon, dtype=np.float64)
    m = len(poly)
    zs = np.linspace(z0, z1, rings + 1)
    verts = [(x, y, z) for z in zs for x, y in poly]
    bot, top = len(verts), len(verts) + 1
    verts += [(0.0, 0.0, z0), (0.0, 0.0, z1)]
    tris = []
    for r in range(rings):
        for k in range(m):
            k1 = (k + 1) % m
            a, b = r * m + k, r * m + k1
            c, d = a + m, b + m
            tris += [(a, b, d), (a, d, c)]
    last = rings * m
    for k in range(m):
        k1 = (k + 1) % m
        tris.append((bot, k1, k))
        tris.append((top, last + k, last + k1))
    v = np.asarray(verts)
    t = np.asarray(tris, dtype=np.int64)
    return clean_mesh(v + np.asarray(origin, float), _orient_outward(v, t))


def _square_polygon(side, per_side=3):
    h = side / 2
    corners = np.array([(h, -h), (h, h), (-h, h), (-h, -h)])
    pts = []
    for i in range(4):
        a, b = corners[i], corners[(i + 1) % 4]
        for s in np.arange(per_side) / per_side:
            pts.append(a + (b - a) * s)
    return np.asarray(pts)


def _arc(r, z_center, n, start, stop):
    """Profile points on a circle of radius ``r`` around (0, z_center), angles from the +Z axis."""
    a = np.linspace(start, stop, n)
    return list(zip(r * np.sin(a), z_center + r * np.cos(a)))


def _subdivide(profile, step):
    out = [profile[0]]
    for p, q in zip(profile[:-1], profile[1:]):
        n = max(int(math.ceil(math.dist(p, q) / step)), 1)
        for s in range(1, n + 1):
            out.append(tuple(np.asarray(p) + (np.asarray(q) - np.asarray(p)) * s / n))
    return out


# ------------------------------------------------------------------ components


@dataclass
class Component:
    """Generated part with ground truth and rendering materials."""

    spec: ComponentSpec
    mesh: TriMesh
    labels: np.ndarray
    instances: list
    vertex_material: np.ndarray
    grasp: GraspSpec

    @property
    def insertion_pins(self):
        n = self.n_contact_pins
        return [p for p in self.instances if p.id <= n]

    @property
    def n_contact_pins(self) -> int:
        return pin_count(self.spec)

    def tri_material(self) -> np.ndarray:
        """(albedo, ambient) per triangle taken from its first vertex."""
        return self.vertex_material[self.mesh.triangles[:, 0]]


def pin_count(spec: ComponentSpec) -> int:
    return sum(spec.row_cols) if spec.row_cols else spec.rows * spec.cols


def pin_positions(spec: ComponentSpec) -> np.ndarray:
    """(x, y) of every contact pin in the object frame, row by row."""
    counts = list(spec.row_cols) if spec.row_cols else [spec.cols] * spec.rows
    out = []
    nrows = len(counts)
    for r, n in enumerate(counts):
        x = (r - (nrows - 1) / 2.0) * spec.row_spacing
        shift = spec.stagger if r % 2 else 0.0
        y0 = -(max(counts) - 1) / 2.0 * spec.pitch + shift
        for c in range(n):
            out.append((x, y0 + c * spec.pitch))
    return np.asarray(out, dtype=np.float64).reshape(-1, 2)


def _pin_mesh(spec, shape, diameter, z0, z1, xy):
    rings = spec.pin_rings
    if shape == "square":
        return prism(_square_polygon(diameter), z0, z1, rings, (xy[0], xy[1], 0.0))
    r = diameter / 2
    zs = np.linspace(z0, z1, rings + 1)
    prof = [(0.0, z0)] + [(r, z) for z in zs] + [(0.0, z1)]
    return revolve(prof, spec.pin_segments, (xy[0], xy[1], 0.0))


def _body_parts(spec):
    """Body meshes with their (albedo, ambient) materials."""
    W, D, H = spec.body
    s = spec.grid_step
    if spec.family == "header_grid":
        return [(grid_box((-W / 2, -D / 2, -H), (W / 2, D / 2, 0.0), s), (70.0, 0.35))]
    if spec.family == "dsub_like":
        fx, fy, fz = spec.flange
        flange = grid_box((-fx / 2, -fy / 2, -fz), (fx / 2, fy / 2, 0.0), s)
        insul = grid_box((-W / 2, -D / 2, -fz - H), (W / 2, D / 2, -fz), s)
        return [(flange, (150.0, 0.35)), (insul, (60.0, 0.35))]
    # led_like: flange disc, cylinder and dome in one surface of revolution
    r = W / 2
    rf = spec.flange[0] / 2
    fz = spec.flange[2]
    zc = -fz - H
    prof = [(0.0, 0.0), (rf, 0.0), (rf, -fz), (r, -fz), (r, zc)]
    prof = _subdivide(prof, s)
    dome = _arc(r, zc, 16, math.pi / 2, math.pi)[1:]
    prof = prof + [(float(a), float(b)) for a, b in dome]
    prof[-1] = (0.0, prof[-1][1])
    return [(revolve(prof, 48), (170.0, 0.4))]


PIN_MATERIALS = {
    "header_grid": (140.0, 0.35),
    "dsub_like": (130.0, 0.35),
    # tinned legs only slightly brighter than the background
    "led_like": (240.0, 1.0),
}


def _tcp_z(spec) -> float:
    """Object-frame Z of the TCP (center of the gripped body)."""
    fz = spec.flange[2] if spec.flange else 0.0
    return -fz - spec.body[2] / 2.0


def default_grasp(spec: ComponentSpec, pad_thickness: float = 2.0 * MM, finger_length: float = 60.0 * MM) -> GraspSpec:
    """Two finger pads squeezing the body faces at +-X."""
    W = spec.body[0]
    zt = _tcp_z(spec)
    fz = spec.flange[2] if spec.flange else 0.0
    top = (-fz - zt) - 0.1 * MM
    if spec.family == "header_grid":
        top = -zt - 0.25 * MM
    wf = spec.finger_width / 2
    boxes = [
        ((W / 2, -wf, -finger_length), (W / 2 + pad_thickness, wf, top)),
        ((-W / 2 - pad_thickness, -wf, -finger_length), (-W / 2, wf, top)),
    ]
    return GraspSpec(RigidTransform.from_translation((0.0, 0.0, zt)), boxes, (1.0, 0.0, 0.0))


def build_component(spec: ComponentSpec) -> Component:
    """Mesh, per-vertex labels, exact pin instances, materials and default grasp."""
    spec.validate()
    parts = _body_parts(spec)
    meshes = [m for m, _ in parts]
    mats = [np.tile(mat, (len(m.vertices), 1)) for m, mat in parts]
    labels = [np.full(len(m.vertices), BODY, np.int8) for m in meshes]
    offset = sum(len(m.vertices) for m in meshes)
    instances = []
    pin_mat = PIN_MATERIALS[spec.family]
    z_axis = np.array([0.0, 0.0, 1.0])
    for i, xy in enumerate(pin_positions(spec), start=1):
        m = _pin_mesh(spec, spec.pin_shape, spec.pin_diameter, 0.0, spec.pin_length, xy)
        ids = np.arange(offset, offset + len(m.vertices))
        base = np.array([xy[0], xy[1], 0.0])
        instances.append(PinInstance(i, ids, z_axis, base, base + spec.pin_length * z_axis, spec.pin_radius))
        meshes.append(m)
        mats.append(np.tile(pin_mat, (len(m.vertices), 1)))
        labels.append(np.full(len(m.vertices), PIN, np.int8))
        offset += len(m.vertices)
    if spec.studs:
        fx, fy, fz = spec.flange
        ys = np.linspace(-1, 1, spec.studs) * (fy / 2 - 2.5 * MM) if spec.studs > 1 else [0.0]
        for y in ys:
            z0, z1 = -fz - spec.stud_length, -fz
            m = _pin_mesh(spec, "cylinder", spec.stud_diameter, z0, z1, (0.0, y))
            ids = np.arange(offset, offset + len(m.vertices))
            top = np.array([0.0, y, z1])
            instances.append(PinInstance(len(instances) + 1, ids, -z_axis, top, top - spec.stud_length * z_axis,
                                         spec.stud_diameter / 2))
            meshes.append(m)
            mats.append(np.tile((150.0, 0.35), (len(m.vertices), 1)))
            labels.append(np.full(len(m.vertices), PIN, np.int8))
            offset += len(m.vertices)
    mesh = TriMesh.concatenate(meshes)
    return Component(spec, mesh, np.concatenate(labels), instances, np.concatenate(mats), default_grasp(spec))


def generate_component(spec: ComponentSpec):
    """(mesh, ground-truth per-vertex labels, pin instances)."""
    c = build_component(spec)
    return c.mesh, c.labels, c.instances


# ------------------------------------------------------------------ bending


def bend_direction(pin: PinInstance, azimuth: float) -> np.ndarray:
    """Unit direction, perpendicular to the pin, selected by ``azimuth``.

    Azimuth 0 is the object X axis projected off the pin axis, pi/2 is
    ``axis x that``.
    """
    a = pin.axis / np.linalg.norm(pin.axis)
    ref = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = ref - (ref @ a) * a
    u /= np.linalg.norm(u)
    v = np.cross(a, u)
    return math.cos(azimuth) * u + math.sin(azimuth) * v


def azimuth_of(pin: PinInstance, direction) -> float:
    """Inverse of :func:`bend_direction` for a direction off the pin axis."""
    a = pin.axis / np.linalg.norm(pin.axis)
    ref = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = ref - (ref @ a) * a
    u /= np.linalg.norm(u)
    v = np.cross(a, u)
    d = np.asarray(direction, float)
    return math.atan2(d @ v, d @ u)


def _bend_rotation(pin, angle, azimuth):
    d = bend_direction(pin, azimuth)
    k = np.cross(pin.axis / np.linalg.norm(pin.axis), d)
    return axis_angle_matrix(k, angle)


def bend_pin(mesh: TriMesh, instances, pin_id: int, angle: float, azimuth: float) -> TriMesh:
    """Rotate one pin rigidly about its base so the tip moves toward ``azimuth``."""
    pin = next((p for p in instances if p.id == pin_id), None)
    if pin is None:
        raise UnknownPin(f"no pin with id {pin_id}")
    if not 0.0 <= angle <= math.radians(45.0) + 1e-12:
        raise ValueError("bend angle must lie in [0, 45] degrees")
    if angle == 0.0:
        return TriMesh(mesh.vertices.copy(), mesh.triangles)
    R = _bend_rotation(pin, angle, azimuth)
    v = mesh.vertices.copy()
    ids = pin.vertex_array()
    v[ids] = (v[ids] - pin.base_point) @ R.T + pin.base_point
    return TriMesh(v, mesh.triangles)


def bent_instance(pin: PinInstance, angle: float, azimuth: float) -> PinInstance:
    R = _bend_rotation(pin, angle, azimuth)
    tip = R @ (pin.tip_point - pin.base_point) + pin.base_point
    return PinInstance(pin.id, pin.vertex_ids, R @ pin.axis, pin.base_point, tip, pin.nominal_radius)


# ------------------------------------------------------------------ scenes


@dataclass
class SceneTruth:
    """Ground truth of one synthetic capture.

    ``offset`` is (dx, dy, dtheta) in the grasp plane; ``cam_T_obj`` is the
    true object pose and ``cam_T_tcp`` the TCP pose the image was taken at.
    """

    cam_T_tcp: RigidTransform
    cam_T_obj: RigidTransform
    offset: tuple = (0.0, 0.0, 0.0)
    bent: list = field(default_factory=list)
    noise_sigma: float = 0.0
    seed: int = 0
    fingers: bool = True

    def __post_init__(self):
        if abs(self.offset[2]) > math.radians(20.0) + 1e-9:
            raise ValueError("in-plane rotation offset must stay within 20 degrees")

    def to_dict(self) -> dict:
        return {
            "cam_T_tcp": self.cam_T_tcp.matrix().tolist(),
            "cam_T_obj": self.cam_T_obj.matrix().tolist(),
            "offset": list(self.offset),
            "bent": [list(b) for b in self.bent],
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "fingers": self.fingers,
        }

    @classmethod
    def from_dict(cls, d) -> SceneTruth:
        from .geometry import transform_from_doc

        return cls(transform_from_doc(d["cam_T_tcp"]), transform_from_doc(d["cam_T_obj"]),
                   tuple(d.get("offset", (0, 0, 0))), [tuple(b) for b in d.get("bent", [])],
                   float(d.get("noise_sigma", 0.0)), int(d.get("seed", 0)), bool(d.get("fingers", True)))


def slip_truth(grasp: GraspSpec, cam_T_tcp: RigidTransform, dx=0.0, dy=0.0, dtheta=0.0, **kw) -> SceneTruth:
    """Object slipped in the hand; the TCP stays at ``cam_T_tcp``."""
    cam_T_obj = cam_T_tcp @ grasp.tcp_T_obj_slipped(dx, dy, dtheta)
    return SceneTruth(cam_T_tcp, cam_T_obj, (dx, dy, dtheta), **kw)


def motion_truth(grasp: GraspSpec, cam_T_tcp: RigidTransform, dx=0.0, dy=0.0, dtheta=0.0,
                 tcp_T_obj: RigidTransform | None = None, **kw) -> SceneTruth:
    """Robot moved the TCP by an in-plane offset; the part stays fixed in the hand."""
    cam_T_tcp_test = cam_T_tcp @ grasp.slip(dx, dy, dtheta)
    t = grasp.tcp_T_obj if tcp_T_obj is None else tcp_T_obj
    return SceneTruth(cam_T_tcp_test, cam_T_tcp_test @ t, (dx, dy, dtheta), **kw)


def render_scene(component: Component, truth: SceneTruth, cam: PinholeCamera, supersample: int = 2,
                 background: float = BACKGROUND_LEVEL):
    """Synthetic 8-bit capture of the grasped part and its RenderBuffers."""
    mesh = component.mesh
    for pin_id, angle, azimuth in truth.bent:
        mesh = bend_pin(mesh, component.instances, pin_id, angle, azimuth)
    verts = [truth.cam_T_obj.apply(mesh.vertices)]
    tris = [mesh.triangles]
    ids = [R.object_tri_ids(mesh, component.instances)]
    mat = [component.tri_material()]
    if truth.fingers:
        fm = component.grasp.finger_mesh()
        verts.append(truth.cam_T_tcp.apply(fm.vertices))
        tris.append(fm.triangles + len(verts[0]))
        ids.append(np.full(len(fm.triangles), FINGER_ID, np.int32))
        mat.append(np.tile(FINGER_MATERIAL, (len(fm.triangles), 1)))
    v = np.concatenate(verts)
    t = np.concatenate(tris)
    m = np.concatenate(mat)
    buf = render_scene_materials(v, t, np.concatenate(ids), cam, m, supersample, background)
    img = buf.intensity
    if truth.noise_sigma > 0:
        rng = np.random.default_rng(truth.seed)
        img = img + rng.normal(0.0, truth.noise_sigma, img.shape)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return image, buf


def render_scene_materials(v, t, ids, cam, materials, supersample=2, background=BACKGROUND_LEVEL) -> RenderBuffers:
    """Render with per-triangle (albedo, ambient) materials."""
    base = R.render_scene(v, t, ids, cam)
    materials = np.asarray(materials, dtype=np.float64)
    normals = R._face_normals(v, t)
    s = max(int(supersample), 1)
    big = cam.scaled(s)
    # only the projected footprint needs the fine pass
    x0, y0, w, h = R.projected_bbox(v, big)
    img = np.full((big.height, big.width), float(background))
    if w > 0 and h > 0:
        sub = big.crop(x0, y0, w, h)
        _, ti = R.raster_triangles(v, t, sub)
        img[y0:y0 + h, x0:x0 + w] = shade_materials(ti, normals, materials, sub, background)
    if s > 1:
        img = img.reshape(cam.height, s, cam.width, s).mean(axis=(1, 3))
    base.intensity = img
    return base


def shade_materials(tri_index, normals, materials, cam, background):
    h, w = tri_index.shape
    out = np.full((h, w), float(background))
    hit = tri_index >= 0
    if not hit.any():
        return out
    jj, ii = np.nonzero(hit)
    ray = np.stack([(ii + 0.5 - cam.cx) / cam.focal_length, (jj + 0.5 - cam.cy) / cam.focal_length,
                    np.ones(len(ii))], axis=1)
    ray /= np.linalg.norm(ray, axis=1, keepdims=True)
    t = tri_index[hit]
    lam = np.abs(np.einsum("ij,ij->i", normals[t], ray))
    alb, amb = materials[t, 0], materials[t, 1]
    out[hit] = alb * (amb + (1.0 - amb) * lam)
    return out


def write_scene(directory, name, image, truth: SceneTruth) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    png = d / f"{name}.png"
    if not cv2.imwrite(str(png), image):
        raise OSError(f"could not write {png}")
    (d / f"{name}.json").write_text(json.dumps(truth.to_dict(), indent=2))
    return png


def read_scene(directory, name):
    d = Path(directory)
    image = cv2.imread(str(d / f"{name}.png"), cv2.IMREAD_GRAYSCALE)
    if image is None:
        raise OSError(f"cannot read {d / name}.png")
    truth = SceneTruth.from_dict(json.loads((d / f"{name}.json").read_text()))
    return image, truth
