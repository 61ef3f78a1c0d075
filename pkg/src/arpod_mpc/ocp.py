"""Shrinking-horizon docking OCP and its multiple-shooting transcription.

At step ``k`` the problem runs over stages ``i = k .. N-1`` toward a fixed
final index ``N``. The decision vector interleaves one 19-scalar block per
stage, ``(u_i, x_{i+1})``, so that the constraint Jacobian is block banded.
The current state ``x_k`` is data, not a decision variable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .dynamics import NU, NX, QUAT, DockingTarget, SpacecraftParams, rk4_batch, rk4_jacobians

NZ = NU + NX


class HorizonExhausted(ValueError):
    """Raised when an instance is requested at or past the final index."""


class DimensionError(ValueError):
    pass


def _diag(values, n, name):
    v = np.asarray(values, dtype=float).reshape(-1)
    if v.shape != (n,):
        raise DimensionError(f"{name} must have {n} diagonal entries, got {v.shape}")
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise ValueError(f"{name} entries must be finite and non-negative")
    return v


@dataclass(frozen=True)
class CostWeights:
    """Diagonal state and input weights."""

    Q: np.ndarray = field(default_factory=lambda: np.r_[10.0 * np.ones(3), 1e-4 * np.ones(3), 1e8 * np.ones(7)])
    R: np.ndarray = field(default_factory=lambda: np.r_[1e3 * np.ones(3), 1e10 * np.ones(3)])

    def __post_init__(self):
        object.__setattr__(self, "Q", _diag(self.Q, NX, "Q"))
        object.__setattr__(self, "R", _diag(self.R, NU, "R"))


@dataclass(frozen=True)
class InputBounds:
    u_min: np.ndarray = field(default_factory=lambda: -np.r_[1e-3 * np.ones(3), 1e-4 * np.ones(3)])
    u_max: np.ndarray = field(default_factory=lambda: np.r_[1e-3 * np.ones(3), 1e-4 * np.ones(3)])

    def __post_init__(self):
        lo = np.asarray(self.u_min, dtype=float).reshape(-1)
        hi = np.asarray(self.u_max, dtype=float).reshape(-1)
        if lo.shape != (NU,) or hi.shape != (NU,):
            raise DimensionError("input bounds must have 6 entries")
        if np.any(lo > hi):
            raise ValueError("u_min must not exceed u_max")
        object.__setattr__(self, "u_min", lo)
        object.__setattr__(self, "u_max", hi)

    def clip(self, U: np.ndarray) -> np.ndarray:
        return np.clip(U, self.u_min, self.u_max)


@dataclass(frozen=True)
class OcpInstance:
    x0: np.ndarray
    k: int
    N: int
    dt: float
    weights: CostWeights
    bounds: InputBounds
    target: DockingTarget
    params: SpacecraftParams

    @property
    def stages(self) -> int:
        return self.N - self.k

    @property
    def n_vars(self) -> int:
        return NZ * self.stages


@dataclass
class DecisionVector:
    """Flat NLP vector for one instance with block accessors.

    ``data`` holds ``stages`` blocks of ``(u_i, x_{i+1})``. Raw quaternions are
    kept as they are; :meth:`states` renormalizes on extraction.
    """

    data: np.ndarray
    k: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 1 or self.data.size % NZ:
            raise DimensionError(f"decision vector length {self.data.size} is not a multiple of {NZ}")

    @classmethod
    def from_blocks(cls, U: np.ndarray, X_next: np.ndarray, k: int) -> "DecisionVector":
        U = np.asarray(U, dtype=float)
        X_next = np.asarray(X_next, dtype=float)
        if U.shape[0] != X_next.shape[0] or U.shape[1:] != (NU,) or X_next.shape[1:] != (NX,):
            raise DimensionError("control and state blocks do not match")
        return cls(np.hstack([U, X_next]).reshape(-1), k)

    @property
    def stages(self) -> int:
        return self.data.size // NZ

    @property
    def blocks(self) -> np.ndarray:
        return self.data.reshape(self.stages, NZ)

    @property
    def controls(self) -> np.ndarray:
        """Raw view of u_k .. u_{N-1}, shape (stages, 6)."""
        return self.blocks[:, :NU]

    @property
    def raw_states(self) -> np.ndarray:
        """Raw view of x_{k+1} .. x_N, shape (stages, 13)."""
        return self.blocks[:, NU:]

    def states(self) -> np.ndarray:
        X = self.raw_states.copy()
        X[:, QUAT] /= np.linalg.norm(X[:, QUAT], axis=1, keepdims=True)
        return X

    def u(self, i: int) -> np.ndarray:
        return self.controls[i - self.k].copy()

    def x(self, i: int) -> np.ndarray:
        j = i - self.k - 1
        if j < 0:
            raise IndexError("x_k is instance data, not part of the decision vector")
        q = self.raw_states[j].copy()
        q[QUAT] /= np.linalg.norm(q[QUAT])
        return q

    def copy(self) -> "DecisionVector":
        return DecisionVector(self.data.copy(), self.k)


def build_instance(x0, k: int, config) -> OcpInstance:
    """Instance for step ``k`` with horizon ``config.N - k``.

    ``config`` needs ``params``, ``N``, ``dt``, ``weights`` and ``bounds``;
    ``target`` is optional.
    """
    N = int(config.N)
    if k >= N:
        raise HorizonExhausted(f"step {k} is at or past the final index {N}")
    if k < 0:
        raise ValueError("step index must be non-negative")
    if not config.dt > 0:
        raise ValueError("dt must be positive")
    x0 = np.asarray(x0, dtype=float).copy()
    if x0.shape != (NX,):
        raise DimensionError(f"x0 must have {NX} entries")
    target = getattr(config, "target", None) or DockingTarget()
    return OcpInstance(x0, int(k), N, float(config.dt), config.weights, config.bounds, target, config.params)


def _check(inst: OcpInstance, d: DecisionVector):
    if d.data.size != inst.n_vars:
        raise DimensionError(f"decision vector has {d.data.size} entries, instance needs {inst.n_vars}")


def trajectory(inst: OcpInstance, d: DecisionVector) -> tuple[np.ndarray, np.ndarray]:
    """``(U, X)`` with ``X`` of shape (stages+1, 13) starting at ``x0``."""
    _check(inst, d)
    X = np.vstack([inst.x0[None, :], d.raw_states])
    return d.controls, X


def rollout(x0, U: np.ndarray, params: SpacecraftParams, dt: float) -> np.ndarray:
    """Forward-simulate ``U`` from ``x0``; returns states x_1 .. x_M."""
    X = np.empty((len(U) + 1, NX))
    X[0] = x0
    for i in range(len(U)):
        X[i + 1] = rk4_batch(X[i:i + 1], U[i:i + 1], params, dt)[0]
    return X[1:]


def cost_terms(inst: OcpInstance, U: np.ndarray, X: np.ndarray) -> float:
    Q, R = inst.weights.Q, inst.weights.R
    E = X[:-1] - inst.target.x_d
    return float(np.einsum("ij,j,ij->", E, Q, E) + np.einsum("ij,j,ij->", U, R, U))


def eval_cost(inst: OcpInstance, d: DecisionVector) -> float:
    U, X = trajectory(inst, d)
    return cost_terms(inst, U, X)


def defects(inst: OcpInstance, U: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Dynamics defects (stages, 13) and terminal residual (13,)."""
    G = rk4_batch(X[:-1], U, inst.params, inst.dt)
    return X[1:] - G, X[-1] - inst.target.x_d


def eval_constraints(inst: OcpInstance, d: DecisionVector) -> np.ndarray:
    """Stacked defects ``x_{i+1} - g_d(x_i, u_i)`` followed by ``x_N - x_d``."""
    U, X = trajectory(inst, d)
    C, T = defects(inst, U, X)
    return np.concatenate([C.reshape(-1), T])


def variable_bounds(inst: OcpInstance) -> tuple[np.ndarray, np.ndarray]:
    """Box bounds on the decision vector (states are unbounded)."""
    lo = np.hstack([np.tile(inst.bounds.u_min, (inst.stages, 1)), np.full((inst.stages, NX), -np.inf)])
    hi = np.hstack([np.tile(inst.bounds.u_max, (inst.stages, 1)), np.full((inst.stages, NX), np.inf)])
    return lo.reshape(-1), hi.reshape(-1)


def eval_cost_gradient(inst: OcpInstance, d: DecisionVector) -> np.ndarray:
    U, X = trajectory(inst, d)
    g = np.zeros((inst.stages, NZ))
    g[:, :NU] = 2.0 * U * inst.weights.R
    # x_{i+1} for i < stages-1 carries stage cost; x_N does not
    g[:-1, NU:] = 2.0 * (X[1:-1] - inst.target.x_d) * inst.weights.Q
    return g.reshape(-1)


def eval_constraint_jacobian(inst: OcpInstance, d: DecisionVector) -> sp.csr_matrix:
    """Sparse Jacobian of :func:`eval_constraints`.

    Defect row block ``i`` touches ``u_i`` (``-B_i``), ``x_{i+1}`` (identity)
    and, for ``i > 0``, ``x_i`` (``-A_i``). The terminal block touches ``x_N``.
    """
    U, X = trajectory(inst, d)
    _, A, B = rk4_jacobians(X[:-1], U, inst.params, inst.dt)
    M = inst.stages
    rows, cols, vals = [], [], []
    eye_r, eye_c = np.arange(NX), np.arange(NX)
    rr_b, cc_b = np.meshgrid(np.arange(NX), np.arange(NU), indexing="ij")
    rr_a, cc_a = np.meshgrid(np.arange(NX), np.arange(NX), indexing="ij")
    for i in range(M):
        r0 = i * NX
        c_blk = i * NZ
        rows.append(r0 + rr_b.ravel())
        cols.append(c_blk + cc_b.ravel())
        vals.append(-B[i].ravel())
        rows.append(r0 + eye_r)
        cols.append(c_blk + NU + eye_c)
        vals.append(np.ones(NX))
        if i > 0:
            c_prev = (i - 1) * NZ + NU
            rows.append(r0 + rr_a.ravel())
            cols.append(c_prev + cc_a.ravel())
            vals.append(-A[i].ravel())
    rows.append(M * NX + eye_r)
    cols.append((M - 1) * NZ + NU + eye_c)
    vals.append(np.ones(NX))
    J = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=((M + 1) * NX, inst.n_vars),
    )
    return J.tocsr()


def warm_start_from(prev, inst: OcpInstance) -> DecisionVector:
    """Initial guess for ``inst``.

    With a previous outcome (solved at step ``k-1``) its first stage is dropped
    and the rest is reused as is. Without one, controls are zero and states are
    the zero-input rollout from ``x0``.
    """
    if prev is None:
        U = np.zeros((inst.stages, NU))
        return DecisionVector.from_blocks(U, rollout(inst.x0, U, inst.params, inst.dt), inst.k)
    prev_d = prev.decision if hasattr(prev, "decision") else prev
    if prev_d.stages != inst.stages + 1:
        raise DimensionError(
            f"previous solution has {prev_d.stages} stages, expected {inst.stages + 1}")
    return DecisionVector(prev_d.data[NZ:].copy(), inst.k)
