"""Pin/body classification, label transfer and pin instance segmentation.

The point classifier is a geometric stand-in for a learned segmenter: a point
is a pin point when the surface across from it is close (thin cross-section)
and the connected thin region it belongs to is elongated. Any other classifier can be plugged in
through :func:`import_labels`; everything downstream only needs per-point
labels.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import ParseError, SizeMismatch
from .model import BODY, PIN, GraspSpec, PointCloud, TriMesh

log = logging.getLogger(__name__)


@dataclass
class PinInstance:
    id: int
    vertex_ids: frozenset
    axis: np.ndarray
    base_point: np.ndarray
    tip_point: np.ndarray
    nominal_radius: float

    def __post_init__(self):
        self.vertex_ids = frozenset(int(i) for i in self.vertex_ids)
        self.axis = np.asarray(self.axis, dtype=np.float64)
        self.base_point = np.asarray(self.base_point, dtype=np.float64)
        self.tip_point = np.asarray(self.tip_point, dtype=np.float64)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.tip_point - self.base_point))

    def vertex_array(self) -> np.ndarray:
        return np.array(sorted(self.vertex_ids), dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "vertex_ids": sorted(self.vertex_ids),
            "axis": self.axis.tolist(),
            "base_point": self.base_point.tolist(),
            "tip_point": self.tip_point.tolist(),
            "nominal_radius": self.nominal_radius,
        }

    @classmethod
    def from_dict(cls, d) -> PinInstance:
        return cls(int(d["id"]), d["vertex_ids"], d["axis"], d["base_point"], d["tip_point"],
                   float(d["nominal_radius"]))


@dataclass
class SegmentationResult:
    per_vertex_label: np.ndarray
    instances: list = field(default_factory=list)
    insertion_instances: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        keep = {p.id for p in self.insertion_instances}
        return {
            "per_vertex_label": self.per_vertex_label.astype(int).tolist(),
            "instances": [p.to_dict() for p in self.instances],
            "insertion_ids": sorted(keep),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d) -> SegmentationResult:
        inst = [PinInstance.from_dict(p) for p in d["instances"]]
        keep = set(d.get("insertion_ids", []))
        return cls(np.asarray(d["per_vertex_label"], dtype=np.int8), inst,
                   [p for p in inst if p.id in keep], list(d.get("warnings", [])))


@dataclass
class ThinnessParams:
    """Classifier parameters in meters (mesh units).

    ``r_max`` bounds the cross-section radius of a pin. Thin points closer
    than ``link_factor`` times the median thickness form regions, and a
    region is a pin when its principal extent dominates
    (``lambda_ratio``).
    """

    r_max: float = 0.6e-3
    lambda_ratio: float = 4.0
    link_factor: float = 1.0
    min_region: int = 10
    cap_margin: float = 0.25
    min_thickness: float = 0.05e-3
    opposite_cos: float = -0.8
    smoothing_k: int = 15
    smoothing_fraction: float = 2.0 / 3.0


def classify_points(cloud: PointCloud, params: ThinnessParams | None = None, scale: float = 1.0) -> np.ndarray:
    """Label each point pin (1) or body (0).

    ``scale`` is the length in meters of one cloud unit, so a cloud
    normalized by :func:`model.normalize_cloud` passes its normalization scale.
    """
    p = params or ThinnessParams()
    pts = np.asarray(cloud.points, dtype=np.float64) * scale
    nrm = np.asarray(cloud.normals, dtype=np.float64)
    n = len(pts)
    labels = np.zeros(n, dtype=np.int8)
    if n < 3:
        return labels
    tree = cKDTree(pts)

    # local thickness: nearest surface across the solid with an opposing normal
    thickness = np.full(n, np.inf)
    for i, nbrs in enumerate(tree.query_ball_point(pts, 2.0 * p.r_max)):
        nb = np.asarray(nbrs)
        nb = nb[nrm[nb] @ nrm[i] < p.opposite_cos]
        if len(nb) == 0:
            continue
        t = (pts[i] - pts[nb]) @ nrm[i]
        t = t[t > p.min_thickness]
        if len(t):
            thickness[i] = t.min()
    thin = thickness <= 2.0 * p.r_max

    # elongation of each connected thin region (neighbor pins stay apart)
    thin_idx = np.nonzero(thin)[0]
    if len(thin_idx) == 0:
        return labels
    link = p.link_factor * float(np.median(thickness[thin_idx]))
    pairs = cKDTree(pts[thin_idx]).query_pairs(link, output_type="ndarray")
    m = len(thin_idx)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(m, m))
    _, comp = connected_components(graph, directed=False)
    for c in np.unique(comp):
        members = thin_idx[comp == c]
        if len(members) < p.min_region:
            continue
        q = pts[members]
        ctr = q.mean(axis=0)
        ev, vec = np.linalg.eigh(np.cov(q.T))
        if ev[2] < p.lambda_ratio * max(ev[1], 1e-30):
            continue
        labels[members] = PIN
        # the free end cap faces along the axis and has no close opposite
        # surface; claim it unless other surface surrounds that end (attached)
        axis = vec[:, 2]
        s_ = (q - ctr) @ axis
        rad = np.linalg.norm((q - ctr) - np.outer(s_, axis), axis=1).max()
        pad = p.cap_margin * float(np.median(thickness[members]))
        reach = (s_.max() - s_.min()) / 2 + 3 * rad + 2 * pad
        cand = np.asarray(tree.query_ball_point(ctr, reach))
        d = pts[cand] - ctr
        sc = d @ axis
        rc = np.linalg.norm(d - np.outer(sc, axis), axis=1)
        for end, sign in ((s_.min(), -1.0), (s_.max(), 1.0)):
            level = np.abs(sc - end) <= pad
            collar = level & (rc > rad + pad) & (rc <= 3 * rad + pad)
            if collar.sum() >= 3:
                continue
            beyond = sign * (sc - end)
            cap = (beyond >= -pad) & (beyond <= pad) & (rc <= rad + pad)
            labels[cand[cap]] = PIN

    # absorb pin caps and stray points that sit inside pin neighborhoods
    k = min(p.smoothing_k, n)
    _, nn = tree.query(pts, k=k)
    frac = labels[nn].mean(axis=1)
    labels = np.where((labels == BODY) & (frac >= p.smoothing_fraction), PIN, labels).astype(np.int8)
    return labels


def import_labels(path, cloud: PointCloud) -> np.ndarray:
    """Read per-point labels (JSON ``{"labels": [...]}`` or a bare list)."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read label file {path}: {exc}") from exc
    raw = doc["labels"] if isinstance(doc, dict) else doc
    labels = np.asarray(raw, dtype=np.int8)
    if labels.ndim != 1 or len(labels) != len(cloud):
        raise SizeMismatch(f"{len(labels)} labels for a cloud of {len(cloud)} points")
    if not np.isin(labels, (BODY, PIN)).all():
        raise ParseError("labels must be 0 (body) or 1 (pin)")
    return labels


def export_labels(path, labels) -> None:
    Path(path).write_text(json.dumps({"labels": np.asarray(labels).astype(int).tolist()}))


def transfer_labels(cloud: PointCloud, labels, mesh: TriMesh, k: int = 15) -> np.ndarray:
    """Majority vote of the ``k`` nearest cloud points for every mesh vertex.

    Cloud and mesh must share a frame. Distance ties go to the lower point
    index, so the result is deterministic.
    """
    labels = np.asarray(labels, dtype=np.int8)
    if len(labels) != len(cloud):
        raise SizeMismatch("label count differs from cloud size")
    k = min(k, len(cloud))
    tree = cKDTree(cloud.points)
    # query a few extra neighbors so that ties at the k-th distance can be resolved by index
    kq = min(k + 4, len(cloud))
    dist, idx = tree.query(mesh.vertices, k=kq)
    dist = np.atleast_2d(dist).reshape(len(mesh.vertices), kq)
    idx = np.atleast_2d(idx).reshape(len(mesh.vertices), kq)
    order = np.lexsort((idx, dist), axis=1)
    chosen = np.take_along_axis(idx, order, axis=1)[:, :k]
    votes = labels[chosen].sum(axis=1)
    return (2 * votes > k).astype(np.int8)


def _pin_components(mesh: TriMesh, vertex_labels) -> list[np.ndarray]:
    is_pin = np.asarray(vertex_labels) == PIN
    e = mesh.edges
    e = e[is_pin[e[:, 0]] & is_pin[e[:, 1]]]
    n = len(mesh.vertices)
    graph = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    pins = np.nonzero(is_pin)[0]
    if len(pins) == 0:
        return []
    groups = {}
    for v in pins:
        groups.setdefault(comp[v], []).append(v)
    # order by lowest vertex index for stable ids
    return [np.asarray(g) for g in sorted(groups.values(), key=lambda g: g[0])]


def promote_pin_shells(mesh: TriMesh, vertex_labels, fraction: float = 0.5) -> np.ndarray:
    """Label a whole connected mesh shell pin when at least ``fraction`` of it already is.

    Pins modeled as separate solids lose their base ring to the body vote
    because the kNN neighborhood reaches the surface they stand on. Shells
    that are mostly body are never demoted, so pins welded into the body
    mesh are unaffected.
    """
    out = np.array(vertex_labels, dtype=np.int8)
    e = mesh.edges
    n = len(mesh.vertices)
    graph = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    ncomp, comp = connected_components(graph, directed=False)
    pin_frac = np.bincount(comp, weights=(out == PIN), minlength=ncomp) / np.bincount(comp, minlength=ncomp)
    promote = (pin_frac >= fraction) & (pin_frac < 1.0)
    out[promote[comp]] = PIN
    return out


def drop_small_components(mesh: TriMesh, vertex_labels, min_vertices: int) -> np.ndarray:
    """Relabel pin components with fewer than ``min_vertices`` vertices as body."""
    out = np.array(vertex_labels, dtype=np.int8)
    for comp in _pin_components(mesh, out):
        if len(comp) < min_vertices:
            out[comp] = BODY
    return out


def _orient_axis(axis, c, proj, radius, body):
    """Flip ``axis`` so it points away from the body (base end nearer the body)."""
    if len(body) == 0:
        return axis
    d = body - c
    radial = np.linalg.norm(d - np.outer(d @ axis, axis), axis=1)
    # ignore body-labeled vertices hugging the pin itself (e.g. missed caps)
    far = body[radial > 1.5 * radius + 1e-12]
    if len(far) == 0:
        return axis
    tree = cKDTree(far)
    d_lo, _ = tree.query(c + axis * proj.min())
    d_hi, _ = tree.query(c + axis * proj.max())
    return -axis if d_hi < d_lo else axis


def instance_segment(mesh: TriMesh, vertex_labels) -> list[PinInstance]:
    """Connected components of pin vertices over mesh edges, one PinInstance each."""
    vertex_labels = np.asarray(vertex_labels)
    body = mesh.vertices[vertex_labels != PIN]
    out = []
    for pid, comp in enumerate(_pin_components(mesh, vertex_labels), start=1):
        pts = mesh.vertices[comp]
        c = pts.mean(axis=0)
        if len(pts) >= 2:
            _, _, vt = np.linalg.svd(pts - c, full_matrices=False)
            axis = vt[0]
        else:
            axis = np.array([0.0, 0.0, 1.0])
        proj = (pts - c) @ axis
        radial = (pts - c) - np.outer(proj, axis)
        radius = float(np.linalg.norm(radial, axis=1).max()) if len(pts) > 1 else 0.0
        if _orient_axis(axis, c, proj, radius, body) is not axis:
            axis, proj = -axis, -proj
        # base and tip sit on the axis line at the extreme projections, so an
        # off-axis corner of a square pin does not skew the tip position
        base = c + axis * proj.min()
        tip = c + axis * proj.max()
        out.append(PinInstance(pid, comp, axis, base, tip, radius))
    return out


def filter_insertion_pins(instances, grasp: GraspSpec) -> list[PinInstance]:
    """Keep pins whose tip lies on the positive-Z side of the TCP."""
    tcp_T_obj = grasp.tcp_T_obj
    return [p for p in instances if tcp_T_obj.apply(p.tip_point)[2] > 0]


def segment(mesh: TriMesh, grasp: GraspSpec, n_points: int = 8192, seed: int | None = None,
            params: ThinnessParams | None = None, k: int = 15, point_labels=None,
            cloud: PointCloud | None = None, min_instance_vertices: int = 8,
            shell_fraction: float | None = 0.5) -> SegmentationResult:
    """Full chain: sample, classify (or take ``point_labels``), transfer, split, filter."""
    from .model import DEFAULT_SEED, normalize_cloud, sample_cloud

    if cloud is None:
        cloud = sample_cloud(mesh, n_points, DEFAULT_SEED if seed is None else seed)
    ncloud, norm = normalize_cloud(cloud)
    if point_labels is None:
        point_labels = classify_points(ncloud, params, scale=norm.scale)
    # labels are per point, so the back-transform only needs the positions
    vertex_labels = transfer_labels(cloud, point_labels, mesh, k)
    if shell_fraction is not None:
        vertex_labels = promote_pin_shells(mesh, vertex_labels, shell_fraction)
    if min_instance_vertices > 1:
        vertex_labels = drop_small_components(mesh, vertex_labels, min_instance_vertices)
    instances = instance_segment(mesh, vertex_labels)
    keep = filter_insertion_pins(instances, grasp)
    warnings = []
    if not instances:
        warnings.append("no pins found")
    radii = [p.nominal_radius for p in instances]
    if radii and params is not None and max(radii) > 2 * params.r_max:
        warnings.append("an instance is wider than a single pin; touching pins may have merged")
    for w in warnings:
        log.warning(w)
    return SegmentationResult(vertex_labels, instances, keep, warnings)
