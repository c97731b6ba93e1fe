"""Rotation and rigid-body primitives.

Two layers live here. The value types :class:`Rotation` and :class:`Pose`
give exact, canonicalized objects for public APIs and tests. The batched
matrix kernels (``so3_exp``, ``so3_log``, ``right_jacobian`` ...) operate on
``(..., 3)`` / ``(..., 3, 3)`` arrays and are what the estimator hot paths use.

Conventions: quaternions are (w, x, y, z) with w >= 0, rotations act on
column vectors, perturbations are applied on the right (R <- R Exp(dphi)).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_SMALL = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of ``v``; broadcasts over leading axes."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cross product of ``(..., 3)`` arrays; cheaper than np.cross on long batches."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def _angle_coeffs(theta2: np.ndarray):
    """Return (sin t / t, (1 - cos t) / t^2) with series near zero."""
    theta = np.sqrt(theta2)
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
                 (1.0 - np.cos(safe)) / (safe * safe))
    return a, b


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues exponential, ``(..., 3) -> (..., 3, 3)``."""
    phi = np.asarray(phi, dtype=float)
    theta2 = np.einsum("...i,...i->...", phi, phi)
    a, b = _angle_coeffs(theta2)
    K = skew(phi)
    K2 = K @ K
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * K2


def so3_rotate_exp(phi: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``Exp(phi) @ v`` without forming matrices."""
    theta2 = np.einsum("...i,...i->...", phi, phi)
    a, b = _angle_coeffs(theta2)
    c = cross(phi, v)
    return v + a[..., None] * c + b[..., None] * cross(phi, c)


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's largest-axis extraction; output (w, x, y, z) with w >= 0."""
    R = np.asarray(R, dtype=float)
    shape = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    m00, m11, m22 = R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]
    tr = m00 + m11 + m22
    cand = np.stack([tr, m00, m11, m22], axis=1)
    pick = np.argmax(cand, axis=1)
    q = np.empty((R.shape[0], 4))
    for k in range(4):
        sel = pick == k
        if not np.any(sel):
            continue
        M = R[sel]
        if k == 0:
            s = 2.0 * np.sqrt(1.0 + M[:, 0, 0] + M[:, 1, 1] + M[:, 2, 2])
            q[sel] = np.stack([0.25 * s,
                               (M[:, 2, 1] - M[:, 1, 2]) / s,
                               (M[:, 0, 2] - M[:, 2, 0]) / s,
                               (M[:, 1, 0] - M[:, 0, 1]) / s], axis=1)
        elif k == 1:
            s = 2.0 * np.sqrt(1.0 + M[:, 0, 0] - M[:, 1, 1] - M[:, 2, 2])
            q[sel] = np.stack([(M[:, 2, 1] - M[:, 1, 2]) / s,
                               0.25 * s,
                               (M[:, 0, 1] + M[:, 1, 0]) / s,
                               (M[:, 0, 2] + M[:, 2, 0]) / s], axis=1)
        elif k == 2:
            s = 2.0 * np.sqrt(1.0 - M[:, 0, 0] + M[:, 1, 1] - M[:, 2, 2])
            q[sel] = np.stack([(M[:, 0, 2] - M[:, 2, 0]) / s,
                               (M[:, 0, 1] + M[:, 1, 0]) / s,
                               0.25 * s,
                               (M[:, 1, 2] + M[:, 2, 1]) / s], axis=1)
        else:
            s = 2.0 * np.sqrt(1.0 - M[:, 0, 0] - M[:, 1, 1] + M[:, 2, 2])
            q[sel] = np.stack([(M[:, 1, 0] - M[:, 0, 1]) / s,
                               (M[:, 0, 2] + M[:, 2, 0]) / s,
                               (M[:, 1, 2] + M[:, 2, 1]) / s,
                               0.25 * s], axis=1)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1.0
    return q.reshape(shape + (4,))


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def quat_log(q: np.ndarray) -> np.ndarray:
    """Axis-angle of a canonical (w >= 0) quaternion; angle in [0, pi]."""
    q = np.asarray(q, dtype=float)
    w = q[..., 0]
    v = q[..., 1:]
    nv = np.linalg.norm(v, axis=-1)
    small = nv < 1e-7
    # 2 atan2(|v|, w) / |v|, series for |v| -> 0 (w ~ 1 there)
    safe_nv = np.where(small, 1.0, nv)
    safe_w = np.where(small, w, 1.0)
    scale = np.where(small,
                     2.0 / safe_w * (1.0 - nv * nv / (3.0 * safe_w * safe_w)),
                     2.0 * np.arctan2(nv, w) / safe_nv)
    return scale[..., None] * v


def so3_log(R: np.ndarray) -> np.ndarray:
    """Logarithm map, ``(..., 3, 3) -> (..., 3)``; stable near 0 and pi."""
    return quat_log(matrix_to_quat(R))


def right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3): Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d)."""
    phi = np.asarray(phi, dtype=float)
    t2 = np.einsum("...i,...i->...", phi, phi)
    t = np.sqrt(t2)
    small = t < 1e-4
    st = np.where(small, 1.0, t)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(st)) / (st * st))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (st - np.sin(st)) / (st ** 3))
    K = skew(phi)
    return np.eye(3) - b[..., None, None] * K + c[..., None, None] * (K @ K)


def right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    t2 = np.einsum("...i,...i->...", phi, phi)
    t = np.sqrt(t2)
    small = t < 1e-4
    st = np.where(small, 1.0, t)
    d = np.where(small, 1.0 / 12.0 + t2 / 720.0,
                 1.0 / (st * st) - (1.0 + np.cos(st)) / (2.0 * st * np.sin(st)))
    K = skew(phi)
    return np.eye(3) + 0.5 * K + d[..., None, None] * (K @ K)


def right_jacobian_t_apply(phi: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``Jr(phi).T @ u`` for batches of vectors."""
    t2 = np.einsum("...i,...i->...", phi, phi)
    t = np.sqrt(t2)
    small = t < 1e-4
    st = np.where(small, 1.0, t)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(st)) / (st * st))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (st - np.sin(st)) / (st ** 3))
    pu = cross(phi, u)
    return u + b[..., None] * pu + c[..., None] * cross(phi, pu)


def rotation_angle(R: np.ndarray) -> np.ndarray:
    return np.linalg.norm(so3_log(R), axis=-1)


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=float)


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=float)


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=float)


@dataclass(frozen=True, eq=False)
class Rotation:
    """Unit quaternion rotation, stored canonically with w >= 0."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("rotation quaternion must be finite and nonzero")
        q = q / n
        if q[0] < 0:
            q = -q
        object.__setattr__(self, "quat", q)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls()

    @classmethod
    def from_matrix(cls, R) -> "Rotation":
        return cls(matrix_to_quat(np.asarray(R, dtype=float)))

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def inverse(self) -> "Rotation":
        w, x, y, z = self.quat
        return Rotation(np.array([w, -x, -y, -z]))

    def __mul__(self, other: "Rotation") -> "Rotation":
        w1, x1, y1, z1 = self.quat
        w2, x2, y2, z2 = other.quat
        return Rotation(np.array([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]))

    def apply(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.matrix.T

    def angle(self) -> float:
        return float(np.linalg.norm(quat_log(self.quat)))

    def __eq__(self, other) -> bool:
        return isinstance(other, Rotation) and bool(np.array_equal(self.quat, other.quat))

    def __repr__(self) -> str:
        return "Rotation(w=%.9g, x=%.9g, y=%.9g, z=%.9g)" % tuple(self.quat)


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: Rotation = field(default_factory=Rotation)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        if not np.all(np.isfinite(t)):
            raise ValueError("pose translation must be finite")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_rt(cls, R, p) -> "Pose":
        return cls(Rotation.from_matrix(R), p)

    @property
    def R(self) -> np.ndarray:
        return self.rotation.matrix

    @property
    def p(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation * other.rotation,
                    self.rotation.apply(other.translation) + self.translation)

    __matmul__ = compose

    def inverse(self) -> "Pose":
        inv = self.rotation.inverse()
        return Pose(inv, -inv.apply(self.translation))

    def transform(self, f) -> np.ndarray:
        return np.asarray(f, dtype=float) @ self.R.T + self.translation

    def __repr__(self) -> str:
        return f"Pose({self.rotation!r}, t={self.translation.tolist()})"


def exp_so3(phi) -> Rotation:
    return Rotation.from_matrix(so3_exp(np.asarray(phi, dtype=float)))


def log_so3(R: Rotation) -> np.ndarray:
    return quat_log(R.quat)


def slerp(Ra: Rotation, Rb: Rotation, s: float) -> Rotation:
    """``Ra Exp(s Log(Ra^-1 Rb))``; exact at both endpoints."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"interpolation fraction {s} outside [0, 1]")
    if s == 0.0:
        return Ra
    if s == 1.0:
        return Rb
    return Ra * exp_so3(s * log_so3(Ra.inverse() * Rb))


def pose_interpolate(Ta: Pose, Tb: Pose, s: float) -> Pose:
    rot = slerp(Ta.rotation, Tb.rotation, s)
    return Pose(rot, (1.0 - s) * Ta.translation + s * Tb.translation)


def transform_point(T: Pose, f) -> np.ndarray:
    return T.transform(f)


def slerp_matrices(Ra: np.ndarray, Rb: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Batched slerp on rotation matrices with per-row fractions."""
    psi = so3_log(np.swapaxes(Ra, -1, -2) @ Rb)
    return Ra @ so3_exp(np.asarray(s)[..., None] * psi)
