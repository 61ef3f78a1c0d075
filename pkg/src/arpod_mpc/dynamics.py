"""Coupled 6DOF relative dynamics of a deputy about a chief in circular orbit.

State layout (13 scalars), all in the chief orbital frame O::

    0:3   dr     relative position, km
    3:6   dv     relative velocity, km/s
    6     eta    error-quaternion scalar part
    7:10  rho    error-quaternion vector part
    10:13 w      error angular velocity, rad/s

Control layout (6 scalars), deputy body frame D::

    0:3   thrust, N
    3:6   torque, N m

Translation follows the Clohessy-Wiltshire equations with the body-frame
thrust rotated into O. Attitude is propagated through Euler's equation in the
deputy frame and transported back to O. The hot loops are numba kernels that
are dtype-generic, which lets :func:`rk4_jacobians` differentiate the discrete
map by complex step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from numpy.typing import ArrayLike

from .spatial_math import IDENTITY, Quaternion, quat_kinematics, quat_to_rotation, skew

NX = 13
NU = 6

POS = slice(0, 3)
VEL = slice(3, 6)
QUAT = slice(6, 10)
OMEGA = slice(10, 13)
FORCE = slice(0, 3)
TORQUE = slice(3, 6)

STATE_NAMES = ("dx", "dy", "dz", "dvx", "dvy", "dvz", "eta", "rho1", "rho2", "rho3", "w1", "w2", "w3")
INPUT_NAMES = ("Fx", "Fy", "Fz", "tau1", "tau2", "tau3")

_CSTEP = 1e-30


@dataclass(frozen=True)
class SpacecraftParams:
    """Chief orbit and deputy mass properties.

    ``accel_scale`` converts thrust/mass (N/kg) into the position units' rate.
    The default of 1.0 feeds ``F/m_d`` straight into the km-based CW equations;
    set it to 1e-3 for a strict m/s^2 -> km/s^2 conversion.
    """

    n: float = -0.0011
    m_d: float = 12.0
    J: tuple[float, float, float] = (0.2734, 0.2734, 0.3125)
    accel_scale: float = 1.0

    def __post_init__(self):
        if not self.m_d > 0:
            raise ValueError("deputy mass must be positive")
        if len(self.J) != 3 or not all(j > 0 for j in self.J):
            raise ValueError("principal inertias must be three positive values")
        object.__setattr__(self, "J", tuple(float(j) for j in self.J))

    @property
    def omega_EO_O(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.n])

    def kernel_args(self) -> tuple[float, float, float, float, float]:
        return (self.n, self.accel_scale / self.m_d, self.J[0], self.J[1], self.J[2])


@dataclass(frozen=True)
class RelativeState:
    dr: np.ndarray
    dv: np.ndarray
    q_err: np.ndarray = field(default_factory=lambda: IDENTITY.copy())
    w_err: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("dr", "dv", "w_err"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        q = np.asarray(self.q_err, dtype=float).reshape(4)
        nrm = np.linalg.norm(q)
        if abs(nrm - 1.0) > 1e-9:
            q = q / nrm
        object.__setattr__(self, "q_err", q)

    @classmethod
    def from_array(cls, x: ArrayLike) -> "RelativeState":
        x = np.asarray(x, dtype=float)
        if x.shape != (NX,):
            raise ValueError(f"state must have {NX} entries, got shape {x.shape}")
        return cls(x[POS], x[VEL], x[QUAT], x[OMEGA])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.dr, self.dv, self.q_err, self.w_err])

    def __array__(self, dtype=None, copy=None):
        return self.as_array().astype(dtype) if dtype else self.as_array()

    @property
    def quaternion(self) -> Quaternion:
        return Quaternion.from_array(self.q_err)


@dataclass(frozen=True)
class ControlInput:
    force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    torque: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "force", np.asarray(self.force, dtype=float).reshape(3))
        object.__setattr__(self, "torque", np.asarray(self.torque, dtype=float).reshape(3))

    @classmethod
    def from_array(cls, u: ArrayLike) -> "ControlInput":
        u = np.asarray(u, dtype=float)
        if u.shape != (NU,):
            raise ValueError(f"input must have {NU} entries, got shape {u.shape}")
        return cls(u[FORCE], u[TORQUE])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.force, self.torque])

    def __array__(self, dtype=None, copy=None):
        return self.as_array().astype(dtype) if dtype else self.as_array()


@dataclass(frozen=True)
class DockingTarget:
    x_d: np.ndarray = field(default_factory=lambda: np.r_[np.zeros(6), 1.0, np.zeros(6)])
    u_d: np.ndarray = field(default_factory=lambda: np.zeros(NU))

    @property
    def z_d(self) -> np.ndarray:
        return np.concatenate([self.u_d, self.x_d])


REFERENCE_PARAMS = SpacecraftParams()
REFERENCE_STATE = RelativeState(
    dr=[1.5, -1.77, 3.0],
    dv=[0.001, 0.0034, 0.0],
    q_err=[0.7715, 0.4629, 0.3086, 0.3086],
    w_err=[0.0, 0.0, -0.005],
)


def _x(s) -> np.ndarray:
    x = np.asarray(s, dtype=float)
    if x.shape != (NX,):
        raise ValueError(f"state must have {NX} entries, got shape {x.shape}")
    return x


def _u(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != (NU,):
        raise ValueError(f"input must have {NU} entries, got shape {u.shape}")
    return u


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _deriv(x, u, n, ims, J1, J2, J3, out):
    eta = x[6]
    r1 = x[7]
    r2 = x[8]
    r3 = x[9]
    w1 = x[10]
    w2 = x[11]
    w3 = x[12]

    # R = (1 - 2|rho|^2) I + 2 rho rho^T - 2 eta [rho x]
    d = 1.0 - 2.0 * (r1 * r1 + r2 * r2 + r3 * r3)
    R00 = d + 2.0 * r1 * r1
    R11 = d + 2.0 * r2 * r2
    R22 = d + 2.0 * r3 * r3
    R01 = 2.0 * r1 * r2 + 2.0 * eta * r3
    R10 = 2.0 * r1 * r2 - 2.0 * eta * r3
    R02 = 2.0 * r1 * r3 - 2.0 * eta * r2
    R20 = 2.0 * r1 * r3 + 2.0 * eta * r2
    R12 = 2.0 * r2 * r3 + 2.0 * eta * r1
    R21 = 2.0 * r2 * r3 - 2.0 * eta * r1

    F0 = u[0]
    F1 = u[1]
    F2 = u[2]
    out[0] = x[3]
    out[1] = x[4]
    out[2] = x[5]
    out[3] = 3.0 * n * n * x[0] + 2.0 * n * x[4] + ims * (R00 * F0 + R01 * F1 + R02 * F2)
    out[4] = -2.0 * n * x[3] + ims * (R10 * F0 + R11 * F1 + R12 * F2)
    out[5] = -n * n * x[2] + ims * (R20 * F0 + R21 * F1 + R22 * F2)

    # deputy-frame rate: R^T (dw + w_EO)
    W0 = w1
    W1 = w2
    W2 = w3 + n
    a0 = R00 * W0 + R10 * W1 + R20 * W2
    a1 = R01 * W0 + R11 * W1 + R21 * W2
    a2 = R02 * W0 + R12 * W1 + R22 * W2
    h0 = J1 * a0
    h1 = J2 * a1
    h2 = J3 * a2
    b0 = (u[3] - (a1 * h2 - a2 * h1)) / J1
    b1 = (u[4] - (a2 * h0 - a0 * h2)) / J2
    b2 = (u[5] - (a0 * h1 - a1 * h0)) / J3
    # back to O, minus w_EO x dw
    out[10] = R00 * b0 + R01 * b1 + R02 * b2 + n * w2
    out[11] = R10 * b0 + R11 * b1 + R12 * b2 - n * w1
    out[12] = R20 * b0 + R21 * b1 + R22 * b2

    out[6] = 0.5 * (r1 * w1 + r2 * w2 + r3 * w3)
    out[7] = -0.5 * (eta * w1 + r2 * w3 - r3 * w2)
    out[8] = -0.5 * (eta * w2 + r3 * w1 - r1 * w3)
    out[9] = -0.5 * (eta * w3 + r1 * w2 - r2 * w1)


@numba.njit(cache=True)
def _rk4(x, u, n, ims, J1, J2, J3, dt, out, k1, k2, k3, k4, tmp):
    _deriv(x, u, n, ims, J1, J2, J3, k1)
    for j in range(13):
        tmp[j] = x[j] + 0.5 * dt * k1[j]
    _deriv(tmp, u, n, ims, J1, J2, J3, k2)
    for j in range(13):
        tmp[j] = x[j] + 0.5 * dt * k2[j]
    _deriv(tmp, u, n, ims, J1, J2, J3, k3)
    for j in range(13):
        tmp[j] = x[j] + dt * k3[j]
    _deriv(tmp, u, n, ims, J1, J2, J3, k4)
    for j in range(13):
        out[j] = x[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
    # sqrt of the plain sum of squares keeps the complex-step derivative exact
    nrm = np.sqrt(out[6] * out[6] + out[7] * out[7] + out[8] * out[8] + out[9] * out[9])
    for j in range(6, 10):
        out[j] = out[j] / nrm


@numba.njit(cache=True)
def _rk4_batch(X, U, n, ims, J1, J2, J3, dt, out):
    k1 = np.empty(13)
    k2 = np.empty(13)
    k3 = np.empty(13)
    k4 = np.empty(13)
    tmp = np.empty(13)
    for i in range(X.shape[0]):
        _rk4(X[i], U[i], n, ims, J1, J2, J3, dt, out[i], k1, k2, k3, k4, tmp)


@numba.njit(cache=True)
def _rk4_jac_batch(X, U, n, ims, J1, J2, J3, dt, G, A, B):
    xc = np.empty(13, dtype=np.complex128)
    uc = np.empty(6, dtype=np.complex128)
    oc = np.empty(13, dtype=np.complex128)
    k1 = np.empty(13, dtype=np.complex128)
    k2 = np.empty(13, dtype=np.complex128)
    k3 = np.empty(13, dtype=np.complex128)
    k4 = np.empty(13, dtype=np.complex128)
    tmp = np.empty(13, dtype=np.complex128)
    h = 1e-30
    for i in range(X.shape[0]):
        for j in range(19):
            for a in range(13):
                xc[a] = X[i, a]
            for a in range(6):
                uc[a] = U[i, a]
            if j < 13:
                xc[j] = X[i, j] + 1j * h
            else:
                uc[j - 13] = U[i, j - 13] + 1j * h
            _rk4(xc, uc, n, ims, J1, J2, J3, dt, oc, k1, k2, k3, k4, tmp)
            for a in range(13):
                if j < 13:
                    A[i, a, j] = oc[a].imag / h
                else:
                    B[i, a, j - 13] = oc[a].imag / h
            if j == 0:
                for a in range(13):
                    G[i, a] = oc[a].real


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

def translational_derivative(s, u, p: SpacecraftParams) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(dr_dot, dv_dot)`` from the CW equations with rotated thrust."""
    x = _x(s)
    u = _u(u)
    n = p.n
    R = quat_to_rotation(x[QUAT] / np.linalg.norm(x[QUAT]))
    a = p.accel_scale / p.m_d * R @ u[FORCE]
    dv_dot = np.array([
        3.0 * n * n * x[0] + 2.0 * n * x[4],
        -2.0 * n * x[3],
        -n * n * x[2],
    ]) + a
    return x[VEL].copy(), dv_dot


def attitude_derivative(s, u, p: SpacecraftParams) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(q_dot, w_dot)`` for the error quaternion and error rate.

    The rate derivative is computed in the deputy frame (Euler's equation) and
    rotated back into the chief frame.
    """
    x = _x(s)
    u = _u(u)
    q = x[QUAT] / np.linalg.norm(x[QUAT])
    dw = x[OMEGA]
    R = quat_to_rotation(q)  # D -> O
    J = np.asarray(p.J)
    w_eo = p.omega_EO_O
    w_D = R.T @ (dw + w_eo)
    wdot_D = (u[TORQUE] - np.cross(w_D, J * w_D)) / J
    w_dot = R @ wdot_D - skew(w_eo) @ dw
    return quat_kinematics(q, dw), w_dot


def full_derivative(s, u, p: SpacecraftParams) -> np.ndarray:
    x = _x(s)
    u = _u(u)
    out = np.empty(NX)
    _deriv(x, u, *p.kernel_args(), out)
    return out


def rk4_step(s, u, p: SpacecraftParams, dt: float) -> np.ndarray:
    """One classic RK4 step with zero-order-hold input; quaternion renormalized."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = _x(s)
    u = _u(u)
    out = np.empty(NX)
    _rk4_batch(x[None, :], u[None, :], *p.kernel_args(), float(dt), out[None, :])
    return out


def rk4_batch(X: np.ndarray, U: np.ndarray, p: SpacecraftParams, dt: float) -> np.ndarray:
    """Apply :func:`rk4_step` row-wise to ``X`` (M, 13) and ``U`` (M, 6)."""
    X = np.ascontiguousarray(X, dtype=float)
    U = np.ascontiguousarray(U, dtype=float)
    out = np.empty_like(X)
    _rk4_batch(X, U, *p.kernel_args(), float(dt), out)
    return out


def rk4_jacobians(X: np.ndarray, U: np.ndarray, p: SpacecraftParams, dt: float):
    """Discrete map and its Jacobians for every row of ``X``, ``U``.

    Returns
    -------
    G : (M, 13) next states
    A : (M, 13, 13) derivative w.r.t. state
    B : (M, 13, 6) derivative w.r.t. input
    """
    X = np.ascontiguousarray(X, dtype=float)
    U = np.ascontiguousarray(U, dtype=float)
    M = X.shape[0]
    G = np.empty((M, NX))
    A = np.empty((M, NX, NX))
    B = np.empty((M, NX, NU))
    _rk4_jac_batch(X, U, *p.kernel_args(), float(dt), G, A, B)
    return G, A, B
