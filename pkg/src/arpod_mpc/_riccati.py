"""Stage-wise KKT solver for linear-quadratic problems with a terminal equality.

Solves, for given diagonal Hessians and stage data,

    min  sum_i 1/2 du_i' Rm_i du_i + r_i' du_i
       + sum_{i>=1} 1/2 dx_i' Qd dx_i + q_i' dx_i + (terminal quadratic)
    s.t. dx_0 = 0,  dx_{i+1} = A_i dx_i + B_i du_i + c_i,  S dx_M = e_S

by a backward Riccati recursion in which the value function also carries a
linear term in the terminal multiplier. The (m x m) terminal system is
accumulated during the same backward pass.
"""

import numba
import numpy as np


@numba.njit(cache=True, fastmath={"reassoc", "contract"})
def factor(A, B, Qd, Rm, P_M, Phi_M, L, K, Hux, Pn, Phin, BtPhi, Gpos):
    M = A.shape[0]
    nx = A.shape[1]
    nu = B.shape[2]
    m = Phi_M.shape[1]
    P = P_M.copy()
    Phi = Phi_M.copy()
    PA = np.empty((nx, nx))
    PB = np.empty((nx, nu))
    H = np.empty((nu, nu))
    W = np.empty((nu, m))
    Pnew = np.empty((nx, nx))
    Phinew = np.empty((nx, m))
    for a in range(m):
        for b in range(m):
            Gpos[a, b] = 0.0
    ok = True
    for i in range(M - 1, -1, -1):
        Ai = A[i]
        Bi = B[i]
        Pn[i] = P
        Phin[i] = Phi
        for r in range(nx):
            for c in range(nx):
                s = 0.0
                for k in range(nx):
                    s += P[r, k] * Ai[k, c]
                PA[r, c] = s
            for c in range(nu):
                s = 0.0
                for k in range(nx):
                    s += P[r, k] * Bi[k, c]
                PB[r, c] = s
        for r in range(nu):
            for c in range(nu):
                s = 0.0
                for k in range(nx):
                    s += Bi[k, r] * PB[k, c]
                H[r, c] = s
            H[r, r] += Rm[i, r]
            for c in range(nx):
                s = 0.0
                for k in range(nx):
                    s += Bi[k, r] * PA[k, c]
                Hux[i, r, c] = s
            for c in range(m):
                s = 0.0
                for k in range(nx):
                    s += Bi[k, r] * Phi[k, c]
                BtPhi[i, r, c] = s
        # Cholesky of the symmetric part
        Li = L[i]
        for r in range(nu):
            for c in range(r + 1):
                s = 0.5 * (H[r, c] + H[c, r])
                for k in range(c):
                    s -= Li[r, k] * Li[c, k]
                if r == c:
                    if s <= 0.0:
                        ok = False
                        s = 1e-300
                    Li[r, r] = np.sqrt(s)
                else:
                    Li[r, c] = s / Li[c, c]
            for c in range(r + 1, nu):
                Li[r, c] = 0.0
        # K = -H^{-1} Hux
        for c in range(nx):
            for r in range(nu):
                s = -Hux[i, r, c]
                for k in range(r):
                    s -= Li[r, k] * K[i, k, c]
                K[i, r, c] = s / Li[r, r]
            for r in range(nu - 1, -1, -1):
                s = K[i, r, c]
                for k in range(r + 1, nu):
                    s -= Li[k, r] * K[i, k, c]
                K[i, r, c] = s / Li[r, r]
        # W = L^{-1} B' Phi ; Gpos += W' W
        for c in range(m):
            for r in range(nu):
                s = BtPhi[i, r, c]
                for k in range(r):
                    s -= Li[r, k] * W[k, c]
                W[r, c] = s / Li[r, r]
        for a in range(m):
            for b in range(a, m):
                s = 0.0
                for k in range(nu):
                    s += W[k, a] * W[k, b]
                Gpos[a, b] += s
                if a != b:
                    Gpos[b, a] += s
        # P_i = Qd + A' P A + Hux' K
        for r in range(nx):
            for c in range(r, nx):
                s = 0.0
                for k in range(nx):
                    s += Ai[k, r] * PA[k, c]
                for k in range(nu):
                    s += Hux[i, k, r] * K[i, k, c]
                Pnew[r, c] = s
        for r in range(nx):
            Pnew[r, r] += Qd[r] if i > 0 else 0.0
            for c in range(r):
                Pnew[r, c] = Pnew[c, r]
        # Phi_i = A' Phi + K' B' Phi
        for r in range(nx):
            for c in range(m):
                s = 0.0
                for k in range(nx):
                    s += Ai[k, r] * Phi[k, c]
                for k in range(nu):
                    s += K[i, k, r] * BtPhi[i, k, c]
                Phinew[r, c] = s
        P[:, :] = Pnew
        Phi[:, :] = Phinew
    return ok


@numba.njit(cache=True, fastmath={"reassoc", "contract"})
def _chol_solve(Li, b, out):
    nu = Li.shape[0]
    for r in range(nu):
        s = b[r]
        for k in range(r):
            s -= Li[r, k] * out[k]
        out[r] = s / Li[r, r]
    for r in range(nu - 1, -1, -1):
        s = out[r]
        for k in range(r + 1, nu):
            s -= Li[k, r] * out[k]
        out[r] = s / Li[r, r]


@numba.njit(cache=True, fastmath={"reassoc", "contract"})
def backward(A, B, c, q, r, p_M, L, Hux, Pn, Phin, kff, sa):
    """Feed-forward terms ``kff`` and the open-loop terminal image ``sa``."""
    M = A.shape[0]
    nx = A.shape[1]
    nu = B.shape[2]
    m = sa.shape[0]
    p = p_M.copy()
    v = np.empty(nx)
    h = np.empty(nu)
    w = np.empty(nx)
    pnew = np.empty(nx)
    for a in range(m):
        sa[a] = 0.0
    for i in range(M - 1, -1, -1):
        Ai = A[i]
        Bi = B[i]
        P = Pn[i]
        for a in range(nx):
            s = p[a]
            for k in range(nx):
                s += P[a, k] * c[i, k]
            v[a] = s
        for a in range(nu):
            s = r[i, a]
            for k in range(nx):
                s += Bi[k, a] * v[k]
            h[a] = -s
        _chol_solve(L[i], h, kff[i])
        for a in range(nx):
            s = c[i, a]
            for k in range(nu):
                s += Bi[a, k] * kff[i, k]
            w[a] = s
        for a in range(m):
            s = 0.0
            for k in range(nx):
                s += Phin[i, k, a] * w[k]
            sa[a] += s
        for a in range(nx):
            s = q[i, a] if i > 0 else 0.0
            for k in range(nx):
                s += Ai[k, a] * v[k]
            for k in range(nu):
                s += Hux[i, k, a] * kff[i, k]
            pnew[a] = s
        p[:] = pnew


@numba.njit(cache=True, fastmath={"reassoc", "contract"})
def forward(A, B, c, L, K, BtPhi, kff, lam, du, dx):
    M = A.shape[0]
    nx = A.shape[1]
    nu = B.shape[2]
    m = lam.shape[0]
    t = np.empty(nu)
    kl = np.empty(nu)
    for a in range(nx):
        dx[0, a] = 0.0
    for i in range(M):
        for a in range(nu):
            s = 0.0
            for k in range(m):
                s -= BtPhi[i, a, k] * lam[k]
            t[a] = s
        _chol_solve(L[i], t, kl)
        for a in range(nu):
            s = kff[i, a] + kl[a]
            for k in range(nx):
                s += K[i, a, k] * dx[i, k]
            du[i, a] = s
        for a in range(nx):
            s = c[i, a]
            for k in range(nx):
                s += A[i, a, k] * dx[i, k]
            for k in range(nu):
                s += B[i, a, k] * du[i, k]
            dx[i + 1, a] = s


@numba.njit(cache=True, fastmath={"reassoc", "contract"})
def costates(A, Qd, q, P_M, p_M, Phi_M, lam, dx, nu_out):
    """Defect multipliers from stationarity w.r.t. the states."""
    M = A.shape[0]
    nx = A.shape[1]
    m = lam.shape[0]
    for a in range(nx):
        s = p_M[a]
        for k in range(nx):
            s += P_M[a, k] * dx[M, k]
        for k in range(m):
            s += Phi_M[a, k] * lam[k]
        nu_out[M - 1, a] = s
    for i in range(M - 1, 0, -1):
        for a in range(nx):
            s = Qd[a] * dx[i, a] + q[i, a]
            for k in range(nx):
                s += A[i, k, a] * nu_out[i, k]
            nu_out[i - 1, a] = s
