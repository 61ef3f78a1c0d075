"""Iteration-capped SQP for the docking OCP.

Each iteration linearizes the RK4 dynamics (complex-step Jacobians), builds a
QP with the exact Hessian of the quadratic tracking cost, solves it with a
primal-dual interior-point method whose Newton systems are factored by a
stage-wise Riccati recursion, and backtracks on an l1 merit function.

The solve stops at whichever comes first: the relative cost change falls
below ``cost_change_tol`` with the iterate feasible, or ``j_max`` iterations
have been completed. The incumbent is always returned; controls in it are
inside the input box exactly.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import _riccati
from .dynamics import NU, NX, QUAT, rk4_jacobians
from .ocp import DecisionVector, OcpInstance, cost_terms, defects, trajectory

log = logging.getLogger(__name__)

# initial duals sit this far above the curvature scale; the cold-start QP has
# linear terms that dwarf the curvature and a small first barrier stalls
DUAL_START = 1e4

ALREADY_OPTIMAL = "already-optimal"
CONVERGED = "cost-change-converged"
CAPPED = "iteration-capped"
STALLED = "stalled"

# eta is fixed by |q| = 1 once rho = 0, so the QP pins the other 12 entries
TERMINAL_ROWS = np.array([0, 1, 2, 3, 4, 5, 7, 8, 9, 10, 11, 12])


@dataclass
class QPModel:
    """Local linear-quadratic model around the current iterate.

    The step ``(du, dx)`` satisfies ``dx_0 = 0`` and
    ``dx_{i+1} = A_i dx_i + B_i du_i + c_i``; the cost is
    ``sum 1/2 du' diag(Rd) du + r' du + sum_{i>=1} 1/2 dx' diag(Qd) dx + q' dx``.
    ``e`` is the required terminal step (``None`` drops the terminal row set).
    """

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    Qd: np.ndarray
    Rd: np.ndarray
    q: np.ndarray
    r: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    e: np.ndarray | None = None
    terminal_rows: np.ndarray = field(default_factory=lambda: TERMINAL_ROWS.copy())

    @property
    def stages(self) -> int:
        return self.A.shape[0]


@dataclass
class QPStep:
    du: np.ndarray
    dx: np.ndarray
    nu: np.ndarray
    lam: np.ndarray
    predicted_decrease: float
    elastic: bool
    iterations: int
    converged: bool


class _Singular(Exception):
    pass


class _Workspace:
    def __init__(self, M: int, m: int):
        self.L = np.zeros((M, NU, NU))
        self.K = np.zeros((M, NU, NX))
        self.Hux = np.zeros((M, NU, NX))
        self.Pn = np.zeros((M, NX, NX))
        self.Phin = np.zeros((M, NX, m))
        self.BtPhi = np.zeros((M, NU, m))
        self.Gpos = np.zeros((m, m))
        self.kff = np.zeros((M, NU))
        self.sa = np.zeros(m)


class _KKT:
    """Riccati factorization for one barrier Hessian, reused across solves."""

    def __init__(self, model: QPModel, Rm: np.ndarray, P_M, p_M, Phi_M, e_S, ws: _Workspace,
                 check_terminal: bool = True):
        self.model, self.P_M, self.p_M, self.Phi_M, self.e_S, self.ws = model, P_M, p_M, Phi_M, e_S, ws
        ok = _riccati.factor(model.A, model.B, model.Qd, Rm, P_M, Phi_M,
                             ws.L, ws.K, ws.Hux, ws.Pn, ws.Phin, ws.BtPhi, ws.Gpos)
        if not ok:
            raise _Singular("stage Hessian not positive definite")
        self.cho = None
        if Phi_M.shape[1] and check_terminal:
            G = ws.Gpos
            dg = np.diag(G)
            if np.any(dg <= 0) or not np.all(np.isfinite(G)):
                raise _Singular("terminal system is rank deficient")
            s = 1.0 / np.sqrt(dg)
            Gs = G * s[:, None] * s[None, :]
            ev = np.linalg.eigvalsh(Gs)
            if ev[0] <= 1e-13 * ev[-1]:
                raise _Singular("terminal system is rank deficient")
            self.scale = s
            self.cho = sla.cho_factor(Gs, lower=True)

    def _gsolve(self, b):
        s = self.scale
        return s * sla.cho_solve(self.cho, s * b)

    def solve(self, r: np.ndarray):
        m = self.model
        ws = self.ws
        M = m.stages
        _riccati.backward(m.A, m.B, m.c, m.q, r, self.p_M, ws.L, ws.Hux, ws.Pn, ws.Phin, ws.kff, ws.sa)
        du = np.empty((M, NU))
        dx = np.empty((M + 1, NX))
        if self.cho is not None:
            lam = -self._gsolve(self.e_S - ws.sa)
            _riccati.forward(m.A, m.B, m.c, ws.L, ws.K, ws.BtPhi, ws.kff, lam, du, dx)
            res = self.e_S - dx[M, m.terminal_rows]
            if np.max(np.abs(res)) > 1e-12 * (1.0 + np.max(np.abs(self.e_S))):
                lam = lam - self._gsolve(res)
                _riccati.forward(m.A, m.B, m.c, ws.L, ws.K, ws.BtPhi, ws.kff, lam, du, dx)
        else:
            lam = np.zeros(0)
            _riccati.forward(m.A, m.B, m.c, ws.L, ws.K, ws.BtPhi, ws.kff, lam, du, dx)
        return du, dx, lam


def _terminal_data(model: QPModel, elastic_weight: float | None):
    qM = model.q[model.stages] if model.q.shape[0] > model.stages else np.zeros(NX)
    if model.e is None:
        return np.zeros((NX, NX)), qM.copy(), np.zeros((NX, 0)), np.zeros(0)
    rows = model.terminal_rows
    e_S = model.e[rows]
    if elastic_weight is None:
        Phi = np.zeros((NX, len(rows)))
        Phi[rows, np.arange(len(rows))] = 1.0
        return np.zeros((NX, NX)), qM.copy(), Phi, e_S
    P = np.zeros((NX, NX))
    P[rows, rows] = elastic_weight
    p = qM.copy()
    p[rows] -= elastic_weight * e_S
    return P, p, np.zeros((NX, 0)), np.zeros(0)


def _step_to_boundary(s, ds):
    neg = ds < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, float(np.min(-s[neg] / ds[neg])))


def _ipm(model: QPModel, elastic_weight, tol, max_iter):
    M = model.stages
    P_M, p_M, Phi_M, e_S = _terminal_data(model, elastic_weight)
    ws = _Workspace(M, Phi_M.shape[1])
    Rd = np.broadcast_to(model.Rd, (M, NU))
    lb, ub = model.lb, model.ub
    fl, fu = np.isfinite(lb), np.isfinite(ub)

    if not (fl.any() or fu.any()):
        kkt = _KKT(model, np.ascontiguousarray(Rd), P_M, p_M, Phi_M, e_S, ws)
        du, dx, lam = kkt.solve(np.ascontiguousarray(model.r))
        return du, dx, lam, P_M, p_M, Phi_M, 0, True

    width = np.where(fl & fu, ub - lb, 1.0)
    # barrier weights follow the curvature each input actually sees,
    # including what the dynamics feed back through the cost-to-go
    kkt0 = _KKT(model, np.ascontiguousarray(Rd), P_M, p_M, Phi_M, e_S, ws, check_terminal=False)
    hdiag = np.einsum("ijk,ijk->ij", ws.L, ws.L)
    wts = np.maximum(hdiag, 1e-12) * width ** 2
    del kkt0
    lbz = np.where(fl, lb, 0.0)
    ubz = np.where(fu, ub, 0.0)
    theta = 0.05
    du = np.zeros((M, NU))
    du = np.where(fl, np.maximum(du, lbz + theta * width), du)
    du = np.where(fu, np.minimum(du, ubz - theta * width), du)
    # slacks are iterated on their own; recomputing them from du loses
    # everything below the rounding level of the bounds
    sl = np.where(fl, du - lbz, 1.0)
    su = np.where(fu, ubz - du, 1.0)
    zl = np.where(fl, DUAL_START * wts / sl, 0.0)
    zu = np.where(fu, DUAL_START * wts / su, 0.0)
    nb = int(fl.sum() + fu.sum())
    dx = None
    lam = np.zeros(e_S.size)
    converged = False
    it = 0

    def mu_of(sl_, zl_, su_, zu_):
        return float((np.sum(np.where(fl, sl_ * zl_, 0.0) / wts) + np.sum(np.where(fu, su_ * zu_, 0.0) / wts)) / nb)

    for it in range(1, max_iter + 1):
        # primal residuals of du - s_l = lb and du + s_u = ub
        rl = np.where(fl, du - sl - lbz, 0.0)
        ru = np.where(fu, du + su - ubz, 0.0)
        Sig = np.where(fl, zl / sl, 0.0) + np.where(fu, zu / su, 0.0)
        kkt = _KKT(model, np.ascontiguousarray(Rd + Sig), P_M, p_M, Phi_M, e_S, ws)
        mu = mu_of(sl, zl, su, zu)

        def direction(tl, tu):
            # complementarity targets tl, tu; eliminate ds and dz into the input Hessian
            r = (model.r - np.where(fl, (tl + zl * rl) / sl, 0.0)
                 + np.where(fu, (tu - zu * ru) / su, 0.0) - Sig * du)
            du_new, dx_new, lam_new = kkt.solve(np.ascontiguousarray(r))
            D = du_new - du
            dsl = np.where(fl, D + rl, 0.0)
            dsu = np.where(fu, -D - ru, 0.0)
            dzl = np.where(fl, (tl - zl * dsl) / sl - zl, 0.0)
            dzu = np.where(fu, (tu - zu * dsu) / su - zu, 0.0)
            return du_new, dx_new, lam_new, D, dsl, dsu, dzl, dzu

        def max_step(dsl, dsu, dzl, dzu):
            return min(_step_to_boundary(sl[fl], dsl[fl]), _step_to_boundary(su[fu], dsu[fu]),
                       _step_to_boundary(zl[fl], dzl[fl]), _step_to_boundary(zu[fu], dzu[fu]))

        zero = np.zeros_like(du)
        _, _, _, Da, dsla, dsua, dzla, dzua = direction(zero, zero)
        a_aff = max_step(dsla, dsua, dzla, dzua)
        mu_aff = mu_of(sl + a_aff * dsla, zl + a_aff * dzla, su + a_aff * dsua, zu + a_aff * dzua)
        sigma = min(1.0, (mu_aff / mu) ** 3)
        tl = np.where(fl, sigma * mu * wts - dsla * dzla, 0.0)
        tu = np.where(fu, sigma * mu * wts - dsua * dzua, 0.0)
        du_new, dx_new, lam_new, D, dsl, dsu, dzl, dzu = direction(tl, tu)
        a = min(1.0, 0.995 * max_step(dsl, dsu, dzl, dzu))
        log.debug("ipm %d mu=%.3e a_aff=%.3e sigma=%.3e a=%.3e", it, mu, a_aff, sigma, a)
        du = du + a * D
        sl = np.where(fl, sl + a * dsl, 1.0)
        su = np.where(fu, su + a * dsu, 1.0)
        zl = zl + a * dzl
        zu = zu + a * dzu
        if dx is None:
            dx, lam = dx_new, lam_new
        else:
            dx = dx + a * (dx_new - dx)
            lam = lam + a * (lam_new - lam)
        if mu_of(sl, zl, su, zu) < tol and a > 0.5:
            converged = True
            break
    return du, dx, lam, P_M, p_M, Phi_M, it, converged


def qp_step(model: QPModel, *, tol: float = 1e-9, max_iter: int = 100,
            elastic_weight: float = 1e13) -> QPStep:
    """Solve the local QP; fall back to an elastic terminal if it is singular.

    The elastic fallback replaces the terminal equality by the quadratic
    penalty ``1/2 w |S dx_M - e_S|^2``.
    """
    elastic = False
    try:
        du, dx, lam, P_M, p_M, Phi_M, it, conv = _ipm(model, None, tol, max_iter)
    except _Singular:
        log.debug("terminal system singular; switching to elastic terminal")
        elastic = True
        du, dx, lam, P_M, p_M, Phi_M, it, conv = _ipm(model, elastic_weight, tol, max_iter)
    M = model.stages
    nu = np.zeros((M, NX))
    _riccati.costates(model.A, model.Qd, model.q, P_M, p_M, Phi_M,
                      np.ascontiguousarray(lam), dx, nu)
    Rd = model.Rd
    dec = -(np.sum(model.r * du) + 0.5 * np.sum(Rd * du * du)
            + np.sum(model.q[1:M] * dx[1:M]) + 0.5 * np.sum(model.Qd * dx[1:M] ** 2))
    return QPStep(du, dx, nu, lam, float(dec), elastic, it, conv)


# ---------------------------------------------------------------------------
# SQP
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolverConfig:
    """``j_max=None`` means no cap (``max_iter`` still guards runaway solves)."""

    j_max: int | None = None
    cost_change_tol: float = 1e-8
    constraint_tol: float = 1e-8
    merit_penalty: float = 1.0
    penalty_growth: float = 2.0
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 30
    max_iter: int = 200
    qp_tol: float = 1e-9

    def __post_init__(self):
        if self.j_max is not None and self.j_max < 1:
            raise ValueError("j_max must be at least 1")
        if self.cost_change_tol <= 0 or self.constraint_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.merit_penalty <= 0 or self.penalty_growth <= 1:
            raise ValueError("merit penalty must be positive with growth > 1")


@dataclass
class SolveOutcome:
    u_seq: np.ndarray
    x_seq: np.ndarray
    iterations: int
    termination: str
    final_cost: float
    max_constraint_violation: float
    wall_time: float
    decision: DecisionVector
    merit_history: list = field(default_factory=list)
    cost_history: list = field(default_factory=list)
    elastic: bool = False
    qp_iterations: list = field(default_factory=list)

    @property
    def first_input(self) -> np.ndarray:
        return self.u_seq[0].copy()


def _project(X):
    # a linearized rotation leaves the unit sphere; pull the attitude back on
    X[:, QUAT] /= np.linalg.norm(X[:, QUAT], axis=1, keepdims=True)
    return X


def _merit(J, C, T, mu):
    return J + mu * (np.abs(C).sum() + np.abs(T).sum())


def _viol(C, T):
    return float(max(np.abs(C).max(initial=0.0), np.abs(T).max()))


def solve(inst: OcpInstance, init: DecisionVector, cfg: SolverConfig = SolverConfig()) -> SolveOutcome:
    t0 = time.perf_counter()
    U, X = trajectory(inst, init)
    U = inst.bounds.clip(U)
    X = _project(X.copy())
    M = inst.stages
    Qd = 2.0 * inst.weights.Q
    Rd = 2.0 * inst.weights.R
    x_d = inst.target.x_d

    J = cost_terms(inst, U, X)
    C, T = defects(inst, U, X)
    viol = _viol(C, T)
    costs = [J]
    merits = []
    mu = cfg.merit_penalty
    cap = cfg.j_max if cfg.j_max is not None else cfg.max_iter
    j = 0
    termination = None
    elastic = False
    qp_its = []

    if J == 0.0 and viol <= cfg.constraint_tol:
        termination = ALREADY_OPTIMAL

    while termination is None and j < cap:
        G, A, B = rk4_jacobians(X[:-1], U, inst.params, inst.dt)
        q = np.zeros((M + 1, NX))
        q[1:M] = Qd * (X[1:M] - x_d)
        model = QPModel(A, B, G - X[1:], Qd, Rd, q, 2.0 * inst.weights.R * U,
                        inst.bounds.u_min - U, inst.bounds.u_max - U, x_d - X[M])
        step = qp_step(model, tol=cfg.qp_tol)
        elastic |= step.elastic
        qp_its.append(step.iterations)
        j += 1
        du, dx = step.du, step.dx
        mult = max(np.abs(step.nu).max(initial=0.0), np.abs(step.lam).max(initial=0.0))
        if mu < 1.1 * mult:
            mu = cfg.penalty_growth * mult
        phi0 = _merit(J, C, T, mu)
        C_lin = X[1:] + dx[1:] - G - np.einsum("ijk,ik->ij", A, dx[:-1]) - np.einsum("ijk,ik->ij", B, du)
        T_lin = X[M] + dx[M] - x_d
        slope = (np.sum(model.r * du) + np.sum(q[1:M] * dx[1:M])
                 + mu * (np.abs(C_lin).sum() + np.abs(T_lin).sum() - np.abs(C).sum() - np.abs(T).sum()))
        log.debug("sqp %d J=%.6e viol=%.3e mu=%.3e slope=%.3e qp_it=%d dec=%.3e", j, J, viol, mu, slope,
                  step.iterations, step.predicted_decrease)
        # a feasible iterate whose best step promises less than the cost-change
        # tolerance is a stationary point, whatever roundoff does to the sign
        if viol < cfg.constraint_tol and -slope <= cfg.cost_change_tol * max(1.0, abs(J)):
            termination = ALREADY_OPTIMAL if j == 1 else CONVERGED
            break
        if slope >= 0.0:
            termination = STALLED
            break

        alpha = 1.0
        accepted = False
        for _ in range(cfg.max_backtracks):
            U_t = inst.bounds.clip(U + alpha * du)
            X_t = _project(X + alpha * dx)
            J_t = cost_terms(inst, U_t, X_t)
            C_t, T_t = defects(inst, U_t, X_t)
            phi_t = _merit(J_t, C_t, T_t, mu)
            if phi_t <= phi0 + cfg.armijo * alpha * slope:
                accepted = True
                break
            alpha *= cfg.backtrack
        if not accepted:
            termination = STALLED
            break

        merits.append((phi0, phi_t))
        J_prev = J
        U, X, J, C, T = U_t, X_t, J_t, C_t, T_t
        viol = _viol(C, T)
        costs.append(J)
        if abs(J - J_prev) < cfg.cost_change_tol * max(1.0, abs(J_prev)) and viol < cfg.constraint_tol:
            termination = CONVERGED

    if termination is None:
        termination = CAPPED

    Xn = X.copy()
    Xn[:, QUAT] /= np.linalg.norm(Xn[:, QUAT], axis=1, keepdims=True)
    decision = DecisionVector.from_blocks(U, X[1:], inst.k)
    return SolveOutcome(
        u_seq=U.copy(), x_seq=Xn, iterations=j, termination=termination, final_cost=J,
        max_constraint_violation=viol, wall_time=time.perf_counter() - t0,
        decision=decision, merit_history=merits, cost_history=costs, elastic=elastic,
        qp_iterations=qp_its,
    )
