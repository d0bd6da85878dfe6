"""Rotation, rigid-body, and similarity-transform algebra.

Conventions (fixed here, used by every other module):

* Quaternions are stored as ``(x, y, z, w)`` with Hamilton multiplication, so
  ``quat_to_rot(quat_multiply(q1, q2)) == quat_to_rot(q1) @ quat_to_rot(q2)``.
* A quaternion written ``q_AtoB`` has ``R = quat_to_rot(q_AtoB)`` mapping
  vectors expressed in frame {A} into frame {B}.  The IMU attitude quaternion
  maps global {G} vectors into the IMU frame {I}.
* Orientation error is the 3-vector ``theta`` with
  ``R_true = Exp(-theta) @ R_est`` (equivalently ``(I - skew(theta)) @ R_est``
  to first order).  Corrections are applied as
  ``q_new = quat_multiply(rotvec_to_quat(-theta), q_old)``.
* A :class:`Pose` holds ``q`` mapping {A}->{B} plus the position of {B}'s
  origin expressed in {A}; a point transforms into {B} as ``R @ (p - t)``.
* A :class:`Sim3Transform` acts on points as ``s * R @ p + t``.

No module may use raw quaternion component formulas outside this file.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DegenerateGeometry(Exception):
    """Point configuration too degenerate to determine a transform."""


_UNIT_TOL = 1e-6


def quat_identity() -> np.ndarray:
    return np.array([0.0, 0.0, 0.0, 1.0])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion cannot be normalized")
    return q / n


def quat_to_rot(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion (x, y, z, w).

    Quaternions off unit norm by less than 1e-6 are normalized defensively;
    anything farther off is rejected.
    """
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if abs(n - 1.0) > _UNIT_TOL:
        raise ValueError(f"quaternion norm {n:.8f} too far from 1")
    x, y, z, w = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_multiply(q1, q2) -> np.ndarray:
    """Hamilton product; composes rotations as R(q1 q2) = R(q1) R(q2)."""
    x1, y1, z1, w1 = np.asarray(q1, dtype=float)
    x2, y2, z2, w2 = np.asarray(q2, dtype=float)
    return np.array(
        [
            w1 * x2 + w2 * x1 + y1 * z2 - z1 * y2,
            w1 * y2 + w2 * y1 + z1 * x2 - x1 * z2,
            w1 * z2 + w2 * z1 + x1 * y2 - y1 * x2,
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        ]
    )


def quat_inverse(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.array([-q[0], -q[1], -q[2], q[3]])


def rotvec_to_quat(theta) -> np.ndarray:
    """Quaternion of the rotation vector theta: R(q) = Exp(skew(theta))."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta)
    if angle < 1e-10:
        # second-order series keeps unit norm to machine precision
        half = 0.5 * theta * (1.0 - angle * angle / 24.0)
        return quat_normalize(np.array([half[0], half[1], half[2], 1.0]))
    axis = theta / angle
    s = np.sin(0.5 * angle)
    return np.array([axis[0] * s, axis[1] * s, axis[2] * s, np.cos(0.5 * angle)])


def rot_to_rotvec(R) -> np.ndarray:
    """Rotation vector (log map) of a rotation matrix."""
    R = np.asarray(R, dtype=float)
    cos_angle = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    angle = np.arccos(cos_angle)
    if angle < 1e-8:
        return unskew(R - R.T) * 0.5
    if np.pi - angle < 1e-6:
        # near pi the off-diagonal formula loses precision; use R + I columns
        B = (R + np.eye(3)) * 0.5
        axis = np.sqrt(np.maximum(np.diag(B), 0.0))
        k = int(np.argmax(axis))
        if axis[k] > 0:
            axis = B[:, k] / axis[k]
            axis /= np.linalg.norm(axis)
        sin_part = unskew(R - R.T) * 0.5
        if np.dot(sin_part, axis) < 0:
            axis = -axis
        return angle * axis
    return angle / (2.0 * np.sin(angle)) * unskew(R - R.T)


def rot_to_quat(R) -> np.ndarray:
    """Quaternion (x, y, z, w) of a rotation matrix, w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        if i == 0:
            s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
            q = np.array(
                [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
            )
        elif i == 1:
            s = np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2]) * 2.0
            q = np.array(
                [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
            )
        else:
            s = np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2]) * 2.0
            q = np.array(
                [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
            )
    if q[3] < 0:
        q = -q
    return quat_normalize(q)


def rotation_error(R_true, R_est) -> np.ndarray:
    """Error vector theta with R_true = Exp(-theta) @ R_est."""
    return -rot_to_rotvec(np.asarray(R_true) @ np.asarray(R_est).T)


def skew(v) -> np.ndarray:
    """Cross-product matrix: skew(v) @ w == cross(v, w)."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def unskew(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    return np.array([M[2, 1], M[0, 2], M[1, 0]])


@dataclass
class Pose:
    """Frame transform {A}->{B}: rotation q_AtoB and {B}-origin position in {A}."""

    q: np.ndarray = field(default_factory=quat_identity)
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.q = quat_normalize(np.asarray(self.q, dtype=float))
        self.t = np.asarray(self.t, dtype=float).reshape(3).copy()

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_rot(cls, R, t) -> "Pose":
        return cls(rot_to_quat(R), t)

    def rotation(self) -> np.ndarray:
        return quat_to_rot(self.q)

    def into_frame(self, p) -> np.ndarray:
        """Coordinates in {B} of points given in {A}; accepts (3,) or (n, 3)."""
        p = np.asarray(p, dtype=float)
        return (p - self.t) @ self.rotation().T

    def from_frame(self, p_b) -> np.ndarray:
        p_b = np.asarray(p_b, dtype=float)
        return p_b @ self.rotation() + self.t

    def compose(self, other: "Pose") -> "Pose":
        """self: {A}->{B} composed with other: {B}->{C}, giving {A}->{C}."""
        R1 = self.rotation()
        return Pose(
            quat_multiply(other.q, self.q),
            self.t + R1.T @ other.t,
        )

    def inverse(self) -> "Pose":
        return Pose(quat_inverse(self.q), -(self.rotation() @ self.t))

    def copy(self) -> "Pose":
        return Pose(self.q.copy(), self.t.copy())


@dataclass
class Sim3Transform:
    """Similarity transform acting on points as s * R @ p + t."""

    s: float = 1.0
    q: np.ndarray = field(default_factory=quat_identity)
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError("sim3 scale must be positive")
        self.s = float(self.s)
        self.q = quat_normalize(np.asarray(self.q, dtype=float))
        self.t = np.asarray(self.t, dtype=float).reshape(3).copy()

    @classmethod
    def identity(cls) -> "Sim3Transform":
        return cls()

    def rotation(self) -> np.ndarray:
        return quat_to_rot(self.q)

    def apply(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return self.s * (p @ self.rotation().T) + self.t

    def compose(self, other: "Sim3Transform") -> "Sim3Transform":
        """Transform applying ``other`` first, then ``self``."""
        return Sim3Transform(
            self.s * other.s,
            quat_multiply(self.q, other.q),
            self.s * (self.rotation() @ other.t) + self.t,
        )

    def inverse(self) -> "Sim3Transform":
        R = self.rotation()
        return Sim3Transform(1.0 / self.s, quat_inverse(self.q), -(R.T @ self.t) / self.s)


def sim3_apply(T: Sim3Transform, p) -> np.ndarray:
    return T.apply(p)


def umeyama_align(source, target, with_scale: bool = True) -> Sim3Transform:
    """Least-squares similarity transform minimizing sum |target - (sR source + t)|^2.

    Closed-form SVD solution; the reflection ambiguity is resolved by forcing
    det(R) = +1.  Requires at least 3 non-collinear point pairs.
    """
    src = np.asarray(source, dtype=float).reshape(-1, 3)
    tgt = np.asarray(target, dtype=float).reshape(-1, 3)
    if src.shape != tgt.shape:
        raise ValueError("source and target must have matching shapes")
    n = src.shape[0]
    if n < 3:
        raise DegenerateGeometry(f"need at least 3 point pairs, got {n}")

    mu_s = src.mean(axis=0)
    mu_t = tgt.mean(axis=0)
    xs = src - mu_s
    xt = tgt - mu_t

    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[1] <= max(sv[0] * 1e-9, 1e-12):
        raise DegenerateGeometry("source points are collinear")

    cov = xt.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt

    if with_scale:
        var_s = (xs * xs).sum() / n
        scale = float(np.trace(np.diag(D) @ S) / var_s)
    else:
        scale = 1.0
    t = mu_t - scale * R @ mu_s
    return Sim3Transform(scale, rot_to_quat(R), t)
