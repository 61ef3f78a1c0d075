"""Quaternion, rotation-matrix and skew-operator primitives.

Quaternions are scalar-first, ``q = (eta, rho1, rho2, rho3)``, and follow the
passive-rotation convention: the rotation matrix of ``q`` is

    R(q) = I - 2 eta [rho x] + 2 [rho x][rho x]

which is the transpose of the more common active (Hamilton) matrix. The
quaternion product is the Hamilton product, so with this convention
``R(qa * qb) = R(qb) @ R(qa)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

UNIT_TOL = 1e-6
RENORM_TOL = 1e-12

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion with scalar part ``eta`` and vector part ``rho``."""

    eta: float
    rho: tuple[float, float, float]

    @classmethod
    def from_array(cls, q: ArrayLike) -> "Quaternion":
        q = renormalize(np.asarray(q, dtype=float))
        return cls(float(q[0]), (float(q[1]), float(q[2]), float(q[3])))

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, (0.0, 0.0, 0.0))

    def __array__(self, dtype=None, copy=None):
        return np.array([self.eta, *self.rho], dtype=dtype)

    def as_array(self) -> np.ndarray:
        return np.array([self.eta, *self.rho])


def _as_quat(q: ArrayLike) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise ValueError(f"quaternion must have 4 components, got shape {q.shape}")
    return q


def renormalize(q: np.ndarray) -> np.ndarray:
    """Project ``q`` back onto the unit sphere if it drifted by more than 1e-12."""
    nrm = np.linalg.norm(q)
    if nrm == 0.0:
        raise ValueError("cannot normalize a zero quaternion")
    if abs(nrm - 1.0) > RENORM_TOL:
        return q / nrm
    return q


def skew(v: ArrayLike) -> np.ndarray:
    """Return the cross-product matrix of ``v`` so that ``skew(v) @ w == v x w``."""
    v1, v2, v3 = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v3, v2],
        [v3, 0.0, -v1],
        [-v2, v1, 0.0],
    ])


def quat_to_rotation(q: ArrayLike) -> np.ndarray:
    """Rotation matrix of a unit quaternion (passive convention).

    Raises
    ------
    ValueError
        If ``q`` deviates from unit norm by more than 1e-6.
    """
    q = _as_quat(q)
    if abs(np.linalg.norm(q) - 1.0) > UNIT_TOL:
        raise ValueError(f"quaternion is not unit norm (|q| = {np.linalg.norm(q)!r})")
    eta = q[0]
    S = skew(q[1:])
    return np.eye(3) - 2.0 * eta * S + 2.0 * S @ S


def quat_inverse(q: ArrayLike) -> np.ndarray:
    q = _as_quat(q)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_multiply(qa: ArrayLike, qb: ArrayLike) -> np.ndarray:
    """Hamilton product ``qa * qb``, renormalized."""
    qa = _as_quat(qa)
    qb = _as_quat(qb)
    ea, ra = qa[0], qa[1:]
    eb, rb = qb[0], qb[1:]
    out = np.empty(4)
    out[0] = ea * eb - ra @ rb
    out[1:] = ea * rb + eb * ra + np.cross(ra, rb)
    return renormalize(out)


def quat_kinematics(q: ArrayLike, omega: ArrayLike) -> np.ndarray:
    """Quaternion rate for angular velocity ``omega`` (rad/s).

    Returns ``-1/2 [[-rho^T], [eta I + skew(rho)]] @ omega`` as a 4-vector.
    """
    q = _as_quat(q)
    w = np.asarray(omega, dtype=float)
    eta, rho = q[0], q[1:]
    out = np.empty(4)
    out[0] = 0.5 * rho @ w
    out[1:] = -0.5 * (eta * w + np.cross(rho, w))
    return out
