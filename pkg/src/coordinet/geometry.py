"""Rotation algebra and pose distances.

Quaternions are stored as ``(qx, qy, qz, qw)`` with the scalar part LAST.
Every function here follows that order; nothing canonicalizes the sign of a
quaternion, so ``q`` and ``-q`` are handled by the distance functions
themselves (absolute dot product / matrix form).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

UNIT_TOL = 1e-6


class InvalidInputError(ValueError):
    """Raised when an input violates an operation's precondition."""


@dataclass(frozen=True)
class Pose:
    """Camera pose: scene-frame translation (m) and scene-from-camera rotation."""

    t: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > UNIT_TOL:
            raise InvalidInputError(f"pose quaternion is not unit-norm: |q|={np.linalg.norm(q):.9f}")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "q", q)

    def as_vector(self) -> np.ndarray:
        """7-vector ``(tx, ty, tz, qx, qy, qz, qw)``."""
        return np.concatenate([self.t, self.q])

    @classmethod
    def from_vector(cls, v) -> "Pose":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3], quat_normalize(v[3:7]))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n <= 0) or not np.all(np.isfinite(n)):
        raise InvalidInputError("cannot normalize a zero-norm quaternion")
    return q / n


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion (batched over leading axes)."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(n - 1.0) > UNIT_TOL):
        raise InvalidInputError(f"quaternion is not unit-norm (max deviation {np.max(np.abs(n - 1.0)):.2e})")
    x, y, z, w = np.moveaxis(q, -1, 0)
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    m = np.stack([
        1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy),
        2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx),
        2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy),
    ], axis=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(R) -> np.ndarray:
    """Inverse of :func:`quat_to_matrix` (Shepperd's method, qw >= 0 on output)."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise InvalidInputError("expected a single 3x3 matrix")
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    q = np.asarray(q)
    if q[3] < 0:
        q = -q
    return quat_normalize(q)


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b`` in (x, y, z, w) order."""
    ax, ay, az, aw = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bx, by, bz, bw = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ], axis=-1)


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([-1.0, -1.0, -1.0, 1.0])


def quat_from_rotvec(v) -> np.ndarray:
    """Exponential map: rotation vector (axis * angle, rad) to unit quaternion."""
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(a/2)/a -> 1/2 as a -> 0
    k = np.where(angle > 1e-12, np.sin(half) / np.where(angle > 1e-12, angle, 1.0), 0.5)
    return np.concatenate([v * k, np.cos(half)], axis=-1)


def quat_to_rotvec(q) -> np.ndarray:
    """Logarithm map, returning the shortest rotation vector (angle <= pi)."""
    q = np.asarray(q, dtype=np.float64)
    q = np.where(q[..., 3:4] < 0, -q, q)
    v = q[..., :3]
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, q[..., 3:4])
    k = np.where(s > 1e-12, angle / np.where(s > 1e-12, s, 1.0), 2.0)
    return v * k


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues' formula; used as an independent construction of rotations."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = skew(axis)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def geodesic_distance(Ra, Rb) -> np.ndarray:
    """Angle (rad) of the relative rotation ``Ra^T Rb``, in [0, pi]."""
    Ra = np.asarray(Ra, dtype=np.float64)
    Rb = np.asarray(Rb, dtype=np.float64)
    rel = np.swapaxes(Ra, -1, -2) @ Rb
    cos = (np.trace(rel, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.arccos(np.clip(cos, -1.0, 1.0))


def quat_angular_error(qa, qb) -> np.ndarray:
    """Rotation error in degrees, invariant to the sign of either quaternion."""
    qa = np.asarray(qa, dtype=np.float64)
    qb = np.asarray(qb, dtype=np.float64)
    d = np.abs(np.sum(qa * qb, axis=-1))
    return np.degrees(2.0 * np.arccos(np.clip(d, 0.0, 1.0)))


def translation_error(ta, tb) -> np.ndarray:
    return np.linalg.norm(np.asarray(ta, dtype=np.float64) - np.asarray(tb, dtype=np.float64), axis=-1)


def random_quaternions(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed unit quaternions (Gaussian-normalize method)."""
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


# -- torch counterparts used by the loss -------------------------------------

def quat_to_matrix_torch(q: torch.Tensor) -> torch.Tensor:
    """Differentiable version of :func:`quat_to_matrix` for ``(..., 4)`` tensors.

    ``q`` is normalized inside, so raw network outputs may be passed directly.
    """
    q = q / q.norm(dim=-1, keepdim=True)
    x, y, z, w = q.unbind(-1)
    m = torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def geodesic_distance_torch(Ra: torch.Tensor, Rb: torch.Tensor) -> torch.Tensor:
    """Relative rotation angle with finite gradients everywhere.

    Evaluated as ``atan2(sin, cos)`` of the relative rotation, which equals the
    clamped arccos of the trace but does not blow up at zero angle.
    """
    rel = Ra.transpose(-1, -2) @ Rb
    cos = (rel.diagonal(dim1=-2, dim2=-1).sum(-1) - 1.0) / 2.0
    axis = torch.stack([
        rel[..., 2, 1] - rel[..., 1, 2],
        rel[..., 0, 2] - rel[..., 2, 0],
        rel[..., 1, 0] - rel[..., 0, 1],
    ], dim=-1)
    sin = 0.5 * torch.sqrt((axis * axis).sum(-1) + 1e-24)
    return torch.atan2(sin, cos)
