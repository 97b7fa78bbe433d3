"""Rigid transforms, pinhole projection and planar poses.

Conventions: right-handed frames, meters and radians internally. A transform
named ``a_T_b`` maps coordinates expressed in frame ``b`` into frame ``a``, so
``compose(a_T_b, b_T_c) == a_T_c``.

Image coordinates are continuous with the top-left pixel covering
``[0, 1) x [0, 1)``; pixel ``(i, j)`` therefore has its center at
``(i + 0.5, j + 0.5)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NonPositiveDepth, ParseError

_ORTHO_TOL = 1e-6


def _frozen(a, shape):
    arr = np.array(a, dtype=np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _frozen(self.rotation, (3, 3))
        t = _frozen(self.translation, (3,))
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ValueError("transform contains non-finite values")
        if np.abs(R @ R.T - np.eye(3)).max() > _ORTHO_TOL or np.linalg.det(R) < 0:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def _unchecked(cls, R, t) -> RigidTransform:
        """Build from parts already known to be valid (products and inverses of valid transforms)."""
        out = object.__new__(cls)
        R = np.asarray(R, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(out, "rotation", R)
        object.__setattr__(out, "translation", t)
        return out

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_matrix(cls, m, orthonormalize: bool = False) -> RigidTransform:
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
        if not np.allclose(m[3], [0, 0, 0, 1], atol=1e-9):
            raise ValueError("last row of a homogeneous transform must be 0 0 0 1")
        R = m[:3, :3]
        if orthonormalize:
            R = project_to_so3(R)
        return cls(R, m[:3, 3])

    @classmethod
    def from_translation(cls, xyz) -> RigidTransform:
        return cls(np.eye(3), xyz)

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(axis_angle_matrix(axis, angle), translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T.copy()
        return RigidTransform._unchecked(Rt, -Rt @ self.translation)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return RigidTransform._unchecked(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points) -> np.ndarray:
        """Map an (N, 3) array (or a single 3-vector) into the target frame."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def apply_vector(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def allclose(self, other: RigidTransform, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
        )

    def __repr__(self):
        rv = rotation_vector(self.rotation)
        return (
            f"RigidTransform(t={np.array2string(self.translation, precision=6)}, "
            f"rotvec={np.array2string(rv, precision=6)})"
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform that applies ``b`` first, then ``a``."""
    return a @ b


def invert(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def project_to_so3(m) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    a = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(a)
    if n == 0:
        raise ValueError("rotation axis must be non-zero")
    x, y, z = a / n
    c, s = math.cos(angle), math.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def rot_x(angle: float) -> np.ndarray:
    return axis_angle_matrix((1, 0, 0), angle)


def rot_y(angle: float) -> np.ndarray:
    return axis_angle_matrix((0, 1, 0), angle)


def rot_z(angle: float) -> np.ndarray:
    return axis_angle_matrix((0, 0, 1), angle)


def rotation_vector(R) -> np.ndarray:
    """Axis * angle representation of a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    cos_a = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = math.acos(cos_a)
    if angle < 1e-12:
        return np.zeros(3)
    if math.pi - angle < 1e-6:
        # near pi the antisymmetric part vanishes; use the symmetric part
        M = (R + np.eye(3)) / 2.0
        axis = M[np.argmax(np.diag(M))]
        axis = axis / np.linalg.norm(axis)
        return axis * angle
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return w / (2.0 * math.sin(angle)) * angle


def rotation_angle(R) -> float:
    """Magnitude of the rotation encoded by ``R`` in radians."""
    cos_a = np.clip((np.trace(np.asarray(R)) - 1.0) / 2.0, -1.0, 1.0)
    return math.acos(cos_a)


def random_transform(rng: np.random.Generator, max_translation: float = 1.0) -> RigidTransform:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    return RigidTransform(R, rng.uniform(-max_translation, max_translation, size=3))


def normalize_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    t = math.fmod(theta, 2.0 * math.pi)
    if t <= -math.pi:
        t += 2.0 * math.pi
    elif t > math.pi:
        t -= 2.0 * math.pi
    return t


@dataclass(frozen=True)
class Pose2D:
    """Planar pose in the image: anchor position in pixels and in-plane angle."""

    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))


@dataclass(frozen=True)
class PinholeCamera:
    """Ideal pinhole camera without distortion.

    The principal point defaults to the image center.
    """

    focal_length: float
    width: int
    height: int
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        if not self.focal_length > 0:
            raise ValueError("focal length must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if self.cx is None:
            object.__setattr__(self, "cx", self.width / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", self.height / 2.0)

    @property
    def principal_point(self) -> np.ndarray:
        return np.array([self.cx, self.cy])

    @property
    def image_size(self) -> tuple[int, int]:
        return self.width, self.height

    def scaled(self, factor: float) -> PinholeCamera:
        """Camera for an image resampled by ``factor`` (2 = twice the pixels)."""
        return PinholeCamera(
            self.focal_length * factor,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
            self.cx * factor,
            self.cy * factor,
        )

    def crop(self, x0: int, y0: int, width: int, height: int) -> PinholeCamera:
        """Camera seeing only the window starting at pixel ``(x0, y0)``."""
        return PinholeCamera(self.focal_length, width, height, self.cx - x0, self.cy - y0)

    def project(self, points) -> np.ndarray:
        return project(points, self)

    def backproject(self, pixels, depth) -> np.ndarray:
        """Camera-frame point(s) at ``depth`` seen through ``pixels``."""
        uv = np.asarray(pixels, dtype=np.float64)
        z = np.asarray(depth, dtype=np.float64)
        x = (uv[..., 0] - self.cx) * z / self.focal_length
        y = (uv[..., 1] - self.cy) * z / self.focal_length
        return np.stack([x, y, np.broadcast_to(z, x.shape)], axis=-1)

    def to_dict(self) -> dict:
        return {
            "focal_length": self.focal_length,
            "width": self.width,
            "height": self.height,
            "cx": self.cx,
            "cy": self.cy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> PinholeCamera:
        return cls(float(d["focal_length"]), int(d["width"]), int(d["height"]),
                   d.get("cx"), d.get("cy"))


def project(point, cam: PinholeCamera) -> np.ndarray:
    """Perspective projection ``x = X f / Z + cx``; works on (3,) or (N, 3)."""
    p = np.asarray(point, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise NonPositiveDepth("point at or behind the camera plane")
    f = cam.focal_length
    return np.stack([p[..., 0] * f / z + cam.cx, p[..., 1] * f / z + cam.cy], axis=-1)


def save_transform(path, t: RigidTransform, **extra) -> None:
    doc = {"matrix": t.matrix().tolist(), "units": {"length": "m", "angle": "rad"}}
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2))


def transform_from_doc(doc) -> RigidTransform:
    m = doc["matrix"] if isinstance(doc, dict) else doc
    try:
        return RigidTransform.from_matrix(np.asarray(m, dtype=np.float64), orthonormalize=True)
    except (ValueError, TypeError) as exc:
        raise ParseError(f"invalid transform: {exc}") from exc


def load_transform(path) -> RigidTransform:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read transform {path}: {exc}") from exc
    return transform_from_doc(doc)
