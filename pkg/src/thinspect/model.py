"""CAD mesh ingestion, surface sampling and point-cloud normalization."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import EmptyMesh, ParseError
from .geometry import RigidTransform, axis_angle_matrix, transform_from_doc

log = logging.getLogger(__name__)

WELD_TOLERANCE = 1e-9
DEFAULT_SEED = 20220523

BODY = 0
PIN = 1


class TriMesh:
    """Indexed triangle mesh in meters."""

    def __init__(self, vertices, triangles):
        v = np.array(vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(triangles, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("triangle index out of range")
        v.setflags(write=False)
        f.setflags(write=False)
        self.vertices = v
        self.triangles = f

    def __len__(self):
        return len(self.vertices)

    @cached_property
    def _face_cross(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return np.cross(b - a, c - a)

    @cached_property
    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._face_cross, axis=1)

    @cached_property
    def face_normals(self) -> np.ndarray:
        n = self._face_cross
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    @cached_property
    def vertex_normals(self) -> np.ndarray:
        acc = np.zeros_like(self.vertices)
        for i in range(3):
            np.add.at(acc, self.triangles[:, i], self._face_cross)
        norm = np.linalg.norm(acc, axis=1, keepdims=True)
        out = acc / np.where(norm > 0, norm, 1.0)
        out[norm[:, 0] == 0] = (0.0, 0.0, 1.0)
        return out

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as an (E, 2) array with ``e[:, 0] < e[:, 1]``."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @property
    def bounds(self) -> np.ndarray:
        return np.stack([self.vertices.min(axis=0), self.vertices.max(axis=0)])

    def transformed(self, t: RigidTransform) -> TriMesh:
        return TriMesh(t.apply(self.vertices), self.triangles)

    def with_vertices(self, vertices) -> TriMesh:
        return TriMesh(vertices, self.triangles)

    @staticmethod
    def concatenate(meshes) -> TriMesh:
        verts, tris, offset = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + offset)
            offset += len(m.vertices)
        return TriMesh(np.concatenate(verts), np.concatenate(tris))


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray
    labels: np.ndarray | None = None
    face_index: np.ndarray | None = None

    def __len__(self):
        return len(self.points)

    def with_labels(self, labels) -> PointCloud:
        return PointCloud(self.points, self.normals, np.asarray(labels, dtype=np.int8), self.face_index)


@dataclass(frozen=True)
class CloudNormalization:
    """``normalized = (p - center) / scale``."""

    center: np.ndarray
    scale: float

    def apply(self, points) -> np.ndarray:
        return (np.asarray(points) - self.center) / self.scale

    def invert(self, points) -> np.ndarray:
        return np.asarray(points) * self.scale + self.center

    def as_transform(self) -> RigidTransform:
        """Rigid part of the normalization (the scale is held separately)."""
        return RigidTransform.from_translation(-self.center)


@dataclass
class GraspSpec:
    """Approximate grasp relative to the CAD model.

    ``tcp_in_object`` is the TCP pose expressed in the object frame
    (object_T_tcp). ``finger_boxes`` are axis-aligned (min, max) corner pairs in
    the TCP frame. ``plane_normal`` is the finger-pad normal in the TCP frame:
    the grasped part may slide in the plane perpendicular to it and rotate
    about it, nothing else.
    """

    tcp_in_object: RigidTransform
    finger_boxes: list = field(default_factory=list)
    plane_normal: tuple = (1.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.finger_boxes:
            raise ValueError("a grasp needs at least one finger box")
        boxes = []
        for lo, hi in self.finger_boxes:
            lo, hi = np.asarray(lo, float), np.asarray(hi, float)
            if np.any(hi <= lo):
                raise ValueError("finger box max corner must exceed min corner")
            boxes.append((lo, hi))
        self.finger_boxes = boxes
        n = np.asarray(self.plane_normal, dtype=np.float64)
        self.plane_normal = tuple(n / np.linalg.norm(n))

    @property
    def tcp_T_obj(self) -> RigidTransform:
        return self.tcp_in_object.inverse()

    @property
    def normal(self) -> np.ndarray:
        return np.asarray(self.plane_normal)

    def plane_axes(self) -> tuple[np.ndarray, np.ndarray]:
        """Two in-plane unit axes (e1, e2) with ``e1 x e2 = normal``."""
        n = self.normal
        helper = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        e1 = np.cross(helper, n)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        return e1, e2

    def slip(self, dx: float = 0.0, dy: float = 0.0, dtheta: float = 0.0) -> RigidTransform:
        """In-plane motion in the TCP frame: shift by (dx, dy), rotate about the normal."""
        e1, e2 = self.plane_axes()
        return RigidTransform(axis_angle_matrix(self.normal, dtheta), dx * e1 + dy * e2)

    def tcp_T_obj_slipped(self, dx=0.0, dy=0.0, dtheta=0.0) -> RigidTransform:
        return self.slip(dx, dy, dtheta) @ self.tcp_T_obj

    def finger_mesh(self) -> TriMesh:
        """Finger boxes as a mesh in the TCP frame."""
        return TriMesh.concatenate([box_mesh(lo, hi) for lo, hi in self.finger_boxes])

    def to_dict(self) -> dict:
        return {
            "tcp_in_object": self.tcp_in_object.matrix().tolist(),
            "finger_boxes": [[lo.tolist(), hi.tolist()] for lo, hi in self.finger_boxes],
            "plane_normal": list(self.plane_normal),
        }

    @classmethod
    def from_dict(cls, d: dict) -> GraspSpec:
        try:
            return cls(
                transform_from_doc(d["tcp_in_object"]),
                [tuple(b) for b in d["finger_boxes"]],
                tuple(d.get("plane_normal", (1.0, 0.0, 0.0))),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"invalid grasp document: {exc}") from exc


def load_grasp(path) -> GraspSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read grasp file {path}: {exc}") from exc
    return GraspSpec.from_dict(doc)


def save_grasp(path, grasp: GraspSpec) -> None:
    Path(path).write_text(json.dumps(grasp.to_dict(), indent=2))


def box_mesh(lo, hi) -> TriMesh:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    v = np.array([[x, y, z] for z in (lo[2], hi[2]) for y in (lo[1], hi[1]) for x in (lo[0], hi[0])])
    f = [
        (0, 2, 1), (1, 2, 3),  # -z
        (4, 5, 6), (5, 7, 6),  # +z
        (0, 1, 4), (1, 5, 4),  # -y
        (2, 6, 3), (3, 6, 7),  # +y
        (0, 4, 2), (2, 4, 6),  # -x
        (1, 3, 5), (3, 7, 5),  # +x
    ]
    return TriMesh(v, f)


# ---------------------------------------------------------------- loading


def _parse_obj(text: str):
    verts, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ValueError("vertex needs three coordinates")
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                if len(parts) < 4:
                    raise ValueError("face needs at least three vertices")
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def _parse_ply(path: Path):
    try:
        ply = PlyData.read(str(path))
        vx = ply["vertex"]
        verts = np.stack([vx["x"], vx["y"], vx["z"]], axis=1).astype(np.float64)
        face_el = ply["face"]
        name = "vertex_indices" if "vertex_indices" in face_el.data.dtype.names else "vertex_index"
        faces = []
        for poly in face_el[name]:
            poly = np.asarray(poly, dtype=np.int64)
            for k in range(1, len(poly) - 1):
                faces.append((poly[0], poly[k], poly[k + 1]))
    except ParseError:
        raise
    except Exception as exc:  # plyfile raises a zoo of exception types on bad input
        raise ParseError(f"cannot parse PLY {path}: {exc}") from exc
    return verts, np.array(faces, dtype=np.int64).reshape(-1, 3)


def clean_mesh(vertices, triangles, weld_tol: float = WELD_TOLERANCE) -> TriMesh:
    """Weld coincident vertices, drop degenerate triangles and unused vertices.

    Vertex order follows first occurrence so that an already clean mesh keeps
    its indexing.
    """
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(triangles, dtype=np.int64)
    if len(v) == 0 or len(f) == 0:
        raise EmptyMesh("mesh has no vertices or no triangles")
    if f.min() < 0 or f.max() >= len(v):
        raise ParseError("face references a vertex that does not exist")

    pairs = cKDTree(v).query_pairs(weld_tol, output_type="ndarray")
    if len(pairs):
        n = len(v)
        graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
        _, comp = connected_components(graph, directed=False)
        # representative = lowest index in each weld group
        rep = np.full(comp.max() + 1, n, dtype=np.int64)
        np.minimum.at(rep, comp, np.arange(n))
        f = rep[comp][f]

    f = f[(f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])]
    if len(f):
        a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
        area2 = np.linalg.norm(np.cross(b - a, c - a), axis=1)
        f = f[area2 > 1e-18]
    if len(f) == 0:
        raise EmptyMesh("no non-degenerate triangles left after cleanup")

    used = np.unique(f)
    remap = np.full(len(v), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriMesh(v[used], remap[f])


def load_mesh(path, scale: float = 1.0) -> TriMesh:
    """Read an OBJ or PLY file; ``scale`` converts file units to meters."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        try:
            text = path.read_text()
        except UnicodeDecodeError as exc:
            raise ParseError(f"{path} is not a text OBJ file") from exc
        verts, faces = _parse_obj(text)
    elif suffix == ".ply":
        verts, faces = _parse_ply(path)
    else:
        raise ParseError(f"unsupported mesh format {suffix!r}")
    return clean_mesh(verts * scale, faces)


def save_mesh_ply(path, mesh: TriMesh, binary: bool = True) -> None:
    v = np.array([tuple(p) for p in mesh.vertices], dtype=[("x", "f8"), ("y", "f8"), ("z", "f8")])
    f = np.empty(len(mesh.triangles), dtype=[("vertex_indices", "i4", (3,))])
    f["vertex_indices"] = mesh.triangles
    PlyData([PlyElement.describe(v, "vertex"), PlyElement.describe(f, "face")], text=not binary).write(str(path))


def save_mesh_obj(path, mesh: TriMesh) -> None:
    lines = [f"v {x:.12g} {y:.12g} {z:.12g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------- sampling


def sample_cloud(mesh: TriMesh, n: int, seed: int = DEFAULT_SEED) -> PointCloud:
    """Area-weighted uniform surface samples carrying flat face normals."""
    if n < 1:
        raise ValueError("need at least one sample")
    if len(mesh.triangles) == 0:
        raise EmptyMesh("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.triangles[face]
    a, b, c = (mesh.vertices[tri[:, i]] for i in range(3))
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return PointCloud(pts, mesh.face_normals[face].copy(), None, face)


def normalize_cloud(cloud: PointCloud) -> tuple[PointCloud, CloudNormalization]:
    """Center on the centroid and scale the farthest point to unit radius."""
    if len(cloud) == 0:
        raise ValueError("cannot normalize an empty cloud")
    center = cloud.points.mean(axis=0)
    radius = float(np.linalg.norm(cloud.points - center, axis=1).max())
    if radius == 0:
        radius = 1.0
    norm = CloudNormalization(center, radius)
    out = PointCloud(norm.apply(cloud.points), cloud.normals, cloud.labels, cloud.face_index)
    return out, norm


def save_cloud_ply(path, cloud: PointCloud) -> None:
    fields = [("x", "f8"), ("y", "f8"), ("z", "f8"), ("nx", "f8"), ("ny", "f8"), ("nz", "f8")]
    if cloud.labels is not None:
        fields.append(("label", "i1"))
    arr = np.empty(len(cloud), dtype=fields)
    for i, k in enumerate("xyz"):
        arr[k] = cloud.points[:, i]
        arr["n" + k] = cloud.normals[:, i]
    if cloud.labels is not None:
        arr["label"] = cloud.labels
    PlyData([PlyElement.describe(arr, "vertex")], text=False).write(str(path))


def load_cloud_ply(path) -> PointCloud:
    try:
        vx = PlyData.read(str(path))["vertex"]
        pts = np.stack([vx["x"], vx["y"], vx["z"]], axis=1).astype(np.float64)
        nrm = np.stack([vx["nx"], vx["ny"], vx["nz"]], axis=1).astype(np.float64)
        names = vx.data.dtype.names
        labels = np.asarray(vx["label"], dtype=np.int8) if "label" in names else None
    except Exception as exc:
        raise ParseError(f"cannot parse point cloud {path}: {exc}") from exc
    return PointCloud(pts, nrm, labels)
