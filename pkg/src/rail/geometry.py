"""Rigid 6D transform kernel and geometric primitive intersection tests.

Pure functions over immutable values; no I/O and no state, safe under
arbitrary concurrent use.

Conventions:
    * A pose maps coordinates of its child frame into its parent frame:
      ``p_parent = R(q) @ p_child + t``.
    * Quaternions are stored ``(w, x, y, z)``, unit norm, canonicalized to
      ``w >= 0`` (``q`` and ``-q`` denote the same rotation).  When ``w == 0``
      the sign is fixed by the first non-zero vector component so equality
      tests stay well-defined.
    * All geometric assertions in this package use ``TOLERANCE`` (1e-9).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TOLERANCE = 1e-9

_QUAT_DEGENERATE_NORM = 1e-6


def _normalize_quat(q: tuple[float, float, float, float]) -> tuple[float, float, float, float]:
    w, x, y, z = (float(v) for v in q)
    norm = math.sqrt(w * w + x * x + y * y + z * z)
    if norm < _QUAT_DEGENERATE_NORM:
        raise ValueError(f"degenerate quaternion, norm={norm!r}")
    w, x, y, z = w / norm, x / norm, y / norm, z / norm
    # Double-cover canonicalization: w >= 0, ties broken on (x, y, z).
    if w < 0.0 or (w == 0.0 and (x < 0.0 or (x == 0.0 and (y < 0.0 or (y == 0.0 and z < 0.0))))):
        w, x, y, z = -w, -x, -y, -z
    return (w, x, y, z)


@dataclass(frozen=True)
class Pose6D:
    """Rigid transform: translation in meters plus unit rotation quaternion."""

    t: tuple[float, float, float] = (0.0, 0.0, 0.0)
    q: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.t) != 3:
            raise ValueError(f"translation must have 3 components, got {len(self.t)}")
        if len(self.q) != 4:
            raise ValueError(f"quaternion must have 4 components, got {len(self.q)}")
        object.__setattr__(self, "t", tuple(float(v) for v in self.t))
        object.__setattr__(self, "q", _normalize_quat(tuple(self.q)))

    @classmethod
    def identity(cls) -> "Pose6D":
        return cls()

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> "Pose6D":
        return cls(t=(x, y, z))

    @classmethod
    def from_axis_angle(
        cls,
        axis: tuple[float, float, float],
        angle_rad: float,
        t: tuple[float, float, float] = (0.0, 0.0, 0.0),
    ) -> "Pose6D":
        ax, ay, az = axis
        norm = math.sqrt(ax * ax + ay * ay + az * az)
        if norm == 0.0:
            raise ValueError("rotation axis must be non-zero")
        half = 0.5 * angle_rad
        s = math.sin(half) / norm
        return cls(t=t, q=(math.cos(half), ax * s, ay * s, az * s))

    def to_json(self) -> dict:
        return {"t": list(self.t), "q": list(self.q)}

    @classmethod
    def from_json(cls, obj: dict) -> "Pose6D":
        return cls(t=tuple(obj["t"]), q=tuple(obj["q"]))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def to_matrix(self) -> np.ndarray:
        """4x4 row-major homogeneous transform."""
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.t
        return m

    @classmethod
    def from_matrix(cls, m, orthonormal_tol: float = 1e-6) -> "Pose6D":
        """Build from a 4x4 (or 3x4) homogeneous matrix.

        Raises ``ValueError`` if the rotation block is not orthonormal within
        ``orthonormal_tol`` or has determinant != +1.
        """
        m = np.asarray(m, dtype=float)
        if m.shape == (16,):
            m = m.reshape(4, 4)
        if m.shape not in ((4, 4), (3, 4)):
            raise ValueError(f"expected 4x4 transform, got shape {m.shape}")
        r = m[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=orthonormal_tol):
            raise ValueError("rotation block is not orthonormal")
        if np.linalg.det(r) < 0.0:
            raise ValueError("rotation block has negative determinant (reflection)")
        return cls(t=tuple(m[:3, 3]), q=matrix_to_quat(r))


def quat_multiply(
    a: tuple[float, float, float, float], b: tuple[float, float, float, float]
) -> tuple[float, float, float, float]:
    """Hamilton product a*b (apply b first, then a)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def quat_rotate(
    q: tuple[float, float, float, float], v: tuple[float, float, float]
) -> tuple[float, float, float]:
    """Rotate vector v by unit quaternion q: v' = v + 2w(u x v) + 2 u x (u x v)."""
    w, x, y, z = q
    vx, vy, vz = v
    # s = 2 * (u x v)
    sx = 2.0 * (y * vz - z * vy)
    sy = 2.0 * (z * vx - x * vz)
    sz = 2.0 * (x * vy - y * vx)
    return (
        vx + w * sx + (y * sz - z * sy),
        vy + w * sy + (z * sx - x * sz),
        vz + w * sz + (x * sy - y * sx),
    )


def quat_to_matrix(q: tuple[float, float, float, float]) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(r: np.ndarray) -> tuple[float, float, float, float]:
    """Rotation matrix to quaternion, stable for all rotation angles."""
    r = np.asarray(r, dtype=float)
    trace = r[0, 0] + r[1, 1] + r[2, 2]
    if trace > 0.0:
        s = math.sqrt(trace + 1.0) * 2.0
        w = 0.25 * s
        x = (r[2, 1] - r[1, 2]) / s
        y = (r[0, 2] - r[2, 0]) / s
        z = (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        w = (r[2, 1] - r[1, 2]) / s
        x = 0.25 * s
        y = (r[0, 1] + r[1, 0]) / s
        z = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        w = (r[0, 2] - r[2, 0]) / s
        x = (r[0, 1] + r[1, 0]) / s
        y = 0.25 * s
        z = (r[1, 2] + r[2, 1]) / s
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        w = (r[1, 0] - r[0, 1]) / s
        x = (r[0, 2] + r[2, 0]) / s
        y = (r[1, 2] + r[2, 1]) / s
        z = 0.25 * s
    return _normalize_quat((w, x, y, z))


def compose(a: Pose6D, b: Pose6D) -> Pose6D:
    """Transform equivalent to applying b, then a (a after b)."""
    return Pose6D(
        t=tuple(ta + tb for ta, tb in zip(a.t, quat_rotate(a.q, b.t))),
        q=quat_multiply(a.q, b.q),
    )


def invert(a: Pose6D) -> Pose6D:
    w, x, y, z = a.q
    q_inv = (w, -x, -y, -z)
    tx, ty, tz = quat_rotate(q_inv, a.t)
    return Pose6D(t=(-tx, -ty, -tz), q=q_inv)


def transform_point(pose: Pose6D, p: tuple[float, float, float]) -> tuple[float, float, float]:
    rx, ry, rz = quat_rotate(pose.q, p)
    return (rx + pose.t[0], ry + pose.t[1], rz + pose.t[2])


@dataclass(frozen=True)
class GeometryPrimitive:
    """Point, sphere, or axis-aligned box in the owning object's frame.

    Boxes are axis-aligned in their own frame; any orientation comes from the
    owning object's pose.
    """

    variant: str
    radius: float = 0.0
    half_extents: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.variant not in ("point", "sphere", "box"):
            raise ValueError(f"unknown primitive variant {self.variant!r}")
        if self.variant == "sphere" and not self.radius > 0.0:
            raise ValueError("sphere radius must be > 0")
        if self.variant == "box":
            he = tuple(float(v) for v in self.half_extents)
            if len(he) != 3 or not all(v > 0.0 for v in he):
                raise ValueError("box half-extents must be 3 values > 0")
            object.__setattr__(self, "half_extents", he)

    @classmethod
    def point(cls) -> "GeometryPrimitive":
        return cls(variant="point")

    @classmethod
    def sphere(cls, radius: float) -> "GeometryPrimitive":
        return cls(variant="sphere", radius=float(radius))

    @classmethod
    def box(cls, hx: float, hy: float, hz: float) -> "GeometryPrimitive":
        return cls(variant="box", half_extents=(hx, hy, hz))

    def to_json(self) -> dict:
        if self.variant == "point":
            return {"variant": "point"}
        if self.variant == "sphere":
            return {"variant": "sphere", "radius": self.radius}
        return {"variant": "box", "half_extents": list(self.half_extents)}

    @classmethod
    def from_json(cls, obj: dict) -> "GeometryPrimitive":
        variant = obj.get("variant")
        if variant == "point":
            return cls.point()
        if variant == "sphere":
            return cls.sphere(obj["radius"])
        if variant == "box":
            return cls.box(*obj["half_extents"])
        raise ValueError(f"unknown primitive variant {variant!r}")


def _dist(a: tuple[float, float, float], b: tuple[float, float, float]) -> float:
    return math.sqrt((a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2 + (a[2] - b[2]) ** 2)


def intersects_sphere(
    prim: GeometryPrimitive,
    prim_pose: Pose6D,
    center: tuple[float, float, float],
    radius: float,
) -> bool:
    """True iff the primitive placed at prim_pose intersects the closed ball.

    ``prim_pose`` and ``center`` must be expressed in the same reference
    frame.  Boundary contact counts as intersection.
    """
    if radius < 0.0:
        raise ValueError("ball radius must be >= 0")
    if prim.variant == "point":
        return _dist(prim_pose.t, center) <= radius
    if prim.variant == "sphere":
        return _dist(prim_pose.t, center) <= radius + prim.radius
    # Box test runs in the box's local frame.
    local = transform_point(invert(prim_pose), center)
    closest = tuple(
        min(max(c, -h), h) for c, h in zip(local, prim.half_extents)
    )
    return _dist(local, closest) <= radius
