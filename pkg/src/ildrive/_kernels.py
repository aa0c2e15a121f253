"""Compiled inner loops for the belief-space planner.

Each kernel has a plain numpy counterpart elsewhere in the package
(``TaskCost``, ``belief_jacobians``, ``propagate_belief``); the tests check
that the two agree.
"""

import numpy as np
from numba import njit
from numpy.polynomial import polynomial as npoly

from ._slip_derivs import slip_partials
from .dims import STATE_DIM

POS = (0, 1)
VEL = (3, 4)
MAX_ORDER = 4


def derivative_grids(grid: np.ndarray) -> np.ndarray:
    """``out[p, q]`` is the coefficient grid of ``d^p/dx^p d^q/dy^q`` of the polynomial."""
    n0, n1 = grid.shape
    out = np.zeros((MAX_ORDER + 1, MAX_ORDER + 1, n0, n1))
    for p in range(MAX_ORDER + 1):
        for q in range(MAX_ORDER + 1 - p):
            g = npoly.polyder(grid, p, axis=0) if p else grid
            g = npoly.polyder(g, q, axis=1) if q else g
            out[p, q, :g.shape[0], :g.shape[1]] = g
    return out


def cost_params(weights, eps: float) -> np.ndarray:
    w = weights
    return np.array([w.alpha2, w.alpha3, w.alpha4, w.gamma1, w.gamma2, w.v_desired, eps])


@njit(cache=True)
def _pos_partials(G, x, y, out):
    n0, n1 = G.shape[2], G.shape[3]
    for p in range(MAX_ORDER + 1):
        for q in range(MAX_ORDER + 1 - p):
            acc = 0.0
            for i in range(n0 - 1, -1, -1):
                row = 0.0
                for j in range(n1 - 1, -1, -1):
                    row = row * y + G[p, q, i, j]
                acc = acc * x + row
            out[p, q] = acc


@njit(cache=True)
def _vel_partials(params, vx, vy, out, scratch):
    a2, a3, vd, eps = params[0], params[1], params[5], params[6]
    if abs(vx) < eps:
        u, sgn = eps, 0.0
    else:
        u, sgn = abs(vx), 1.0 if vx > 0 else -1.0
    slip_partials(u, vy, scratch)
    k = 0
    for order in range(MAX_ORDER + 1):
        for p in range(order, -1, -1):
            q = order - p
            out[p, q] = a3 * scratch[k] * (sgn ** p if p else 1.0)
            k += 1
    dv = vx - vd
    out[0, 0] += a2 * dv * dv
    out[1, 0] += 2.0 * a2 * dv
    out[2, 0] += 2.0 * a2


@njit(cache=True)
def _block_expected(D, S, i0, i1):
    """0.5 * tr(S_block * Hessian) for a planar block."""
    idx = (i0, i1)
    acc = 0.0
    for a in range(2):
        for b in range(2):
            acc += S[idx[a], idx[b]] * D[2 - a - b, a + b]
    return 0.5 * acc


@njit(cache=True)
def expected_costs(MU, SIG, U, G, params):
    """Expected cost ``l(mu, u) + 0.5 tr(Sigma H)`` for each row."""
    n = MU.shape[0]
    out = np.empty(n)
    Dp = np.zeros((MAX_ORDER + 1, MAX_ORDER + 1))
    Dv = np.zeros((MAX_ORDER + 1, MAX_ORDER + 1))
    scratch = np.empty(15)
    for t in range(n):
        _pos_partials(G, MU[t, 0], MU[t, 1], Dp)
        _vel_partials(params, MU[t, 3], MU[t, 4], Dv, scratch)
        c = Dp[0, 0] + Dv[0, 0]
        c += _block_expected(Dp, SIG[t], 0, 1) + _block_expected(Dv, SIG[t], 3, 4)
        c += params[2] * (params[3] * U[t, 0] ** 2 + params[4] * U[t, 1] ** 2)
        out[t] = c
    return out


@njit(cache=True)
def _accumulate_block(D, S, i0, i1, L0, Lb, Lbb, ds):
    idx = (i0, i1)
    # D[p, q] holds the partial with p derivatives along idx[0] and q along idx[1].
    for a in range(2):
        for b in range(2):
            nb_ = a + b
            L0[0] += 0.5 * S[idx[a], idx[b]] * D[2 - nb_, nb_]
            Lb[ds + idx[a] * ds + idx[b]] += 0.5 * D[2 - nb_, nb_]
    for k in range(2):
        acc = D[1 - k, k]
        for a in range(2):
            for b in range(2):
                m = a + b + k
                acc += 0.5 * S[idx[a], idx[b]] * D[3 - m, m]
        Lb[idx[k]] += acc
        for l in range(2):
            acc = D[2 - k - l, k + l]
            for a in range(2):
                for b in range(2):
                    m = a + b + k + l
                    acc += 0.5 * S[idx[a], idx[b]] * D[4 - m, m]
            Lbb[idx[k], idx[l]] += acc
        for a in range(2):
            for b in range(2):
                m = a + b + k
                v = 0.5 * D[3 - m, m]
                r = ds + idx[a] * ds + idx[b]
                Lbb[r, idx[k]] += v
                Lbb[idx[k], r] += v


@njit(cache=True)
def cost_expansion(MU, SIG, U, G, params):
    """Batched expansion of the expected cost w.r.t. ``b = [mu; vec(Sigma)]`` and ``u``."""
    n, ds = MU.shape
    nu = U.shape[1]
    nb = ds + ds * ds
    L0 = np.zeros(n)
    Lb = np.zeros((n, nb))
    Lu = np.zeros((n, nu))
    Lbb = np.zeros((n, nb, nb))
    Lub = np.zeros((n, nu, nb))
    Luu = np.zeros((n, nu, nu))
    Dp = np.zeros((MAX_ORDER + 1, MAX_ORDER + 1))
    Dv = np.zeros((MAX_ORDER + 1, MAX_ORDER + 1))
    scratch = np.empty(15)
    acc = np.zeros(1)
    a4, g = params[2], (params[3], params[4])
    for t in range(n):
        _pos_partials(G, MU[t, 0], MU[t, 1], Dp)
        _vel_partials(params, MU[t, 3], MU[t, 4], Dv, scratch)
        acc[0] = Dp[0, 0] + Dv[0, 0]
        _accumulate_block(Dp, SIG[t], 0, 1, acc, Lb[t], Lbb[t], ds)
        _accumulate_block(Dv, SIG[t], 3, 4, acc, Lb[t], Lbb[t], ds)
        for i in range(nu):
            acc[0] += a4 * g[i] * U[t, i] ** 2
            Lu[t, i] = 2.0 * a4 * g[i] * U[t, i]
            Luu[t, i, i] = 2.0 * a4 * g[i]
        L0[t] = acc[0]
    return L0, Lb, Lu, Lbb, Lub, Luu


@njit(cache=True)
def _features(z, W, a0, m, sk, phi):
    for i in range(m):
        p = 0.0
        for d in range(z.size):
            p += W[a0 + i, d] * z[d]
        phi[i] = sk * np.cos(p)
        phi[m + i] = sk * np.sin(p)


@njit(cache=True, fastmath=True)
def belief_rollout(b0, U_nom, B_nom, kff, Kfb, alpha, lo, hi, W, sk, sn2, ac, as_, chol, off):
    """Forward pass ``u = clip(u_nom + alpha k + K (b - b_nom))`` through the belief map."""
    T, du = U_nom.shape
    nb = b0.size
    ds = off.size - 1
    B = np.empty((T + 1, nb))
    U = np.empty((T, du))
    B[0] = b0
    z = np.empty(ds + du)
    g = np.empty(ds)
    var = np.empty(ds)
    M = np.empty((ds, ds))
    phi = np.empty(chol.shape[1])
    v = np.empty(chol.shape[1])
    S = np.empty((ds, ds))
    for t in range(T):
        for i in range(du):
            u = U_nom[t, i] + alpha * kff[t, i]
            for j in range(nb):
                u += Kfb[t, i, j] * (B[t, j] - B_nom[t, j])
            U[t, i] = min(max(u, lo[i]), hi[i])
        for d in range(ds):
            z[d] = B[t, d]
        for i in range(du):
            z[ds + i] = U[t, i]
        for o in range(ds):
            a0 = off[o]
            m = off[o + 1] - a0
            _features(z, W, a0, m, sk[o], phi)
            mean = 0.0
            for d in range(ds):
                M[o, d] = 1.0 if o == d else 0.0
            for i in range(m):
                c, s = phi[i], phi[m + i]
                mean += ac[a0 + i] * c + as_[a0 + i] * s
                coef = as_[a0 + i] * c - ac[a0 + i] * s
                for d in range(ds):
                    M[o, d] += coef * W[a0 + i, d]
            ss = 0.0
            for r in range(2 * m):
                acc = phi[r]
                for q in range(r):
                    acc -= chol[o, r, q] * v[q]
                v[r] = acc / chol[o, r, r]
                ss += v[r] * v[r]
            g[o] = mean
            var[o] = sn2[o] * (1.0 + ss)
        for d in range(ds):
            B[t + 1, d] = B[t, d] + g[d]
        for i in range(ds):
            for j in range(ds):
                acc = 0.0
                for k in range(ds):
                    mk = 0.0
                    for l in range(ds):
                        mk += B[t, ds + k * ds + l] * M[j, l]
                    acc += M[i, k] * mk
                S[i, j] = acc
        for i in range(ds):
            for j in range(ds):
                val = 0.5 * (S[i, j] + S[j, i])
                if i == j:
                    val += var[i]
                B[t + 1, ds + i * ds + j] = val
    return B, U


@njit(cache=True, fastmath=True)
def belief_jacobians(B, U, W, sk, sn2, ac, as_, chol, off, cholT):
    """Analytic ``(Fb, Fu)`` of the belief map at every ``(B[t], U[t])``."""
    T, du = U.shape
    ds = off.size - 1
    dz = ds + du
    nb = ds + ds * ds
    Fb = np.zeros((T, nb, nb))
    Fu = np.zeros((T, nb, du))
    z = np.empty(dz)
    jac = np.empty((ds, dz))
    hess = np.empty((ds, dz, dz))
    vgrad = np.empty((ds, dz))
    phi = np.empty(chol.shape[1])
    q = np.empty(chol.shape[1])
    M = np.empty((ds, ds))
    P = np.empty((ds, ds))
    X = np.empty((ds, ds))
    for t in range(T):
        for d in range(ds):
            z[d] = B[t, d]
        for i in range(du):
            z[ds + i] = U[t, i]
        for o in range(ds):
            a0 = off[o]
            m = off[o + 1] - a0
            _features(z, W, a0, m, sk[o], phi)
            # q = A^-1 phi by two triangular solves
            for r in range(2 * m):
                acc = phi[r]
                for k in range(r):
                    acc -= chol[o, r, k] * q[k]
                q[r] = acc / chol[o, r, r]
            for r in range(2 * m - 1, -1, -1):
                acc = q[r]
                for k in range(r + 1, 2 * m):
                    acc -= cholT[o, r, k] * q[k]
                q[r] = acc / chol[o, r, r]
            jac[o, :] = 0.0
            hess[o, :, :] = 0.0
            vgrad[o, :] = 0.0
            for i in range(m):
                c, s = phi[i], phi[m + i]
                coef = as_[a0 + i] * c - ac[a0 + i] * s
                curv = -(ac[a0 + i] * c + as_[a0 + i] * s)
                vg = 2.0 * sn2[o] * (c * q[m + i] - s * q[i])
                for d in range(dz):
                    wd = W[a0 + i, d]
                    jac[o, d] += coef * wd
                    vgrad[o, d] += vg * wd
                    for e in range(d + 1):
                        hess[o, d, e] += curv * wd * W[a0 + i, e]
            for d in range(dz):
                for e in range(d):
                    hess[o, e, d] = hess[o, d, e]
        for i in range(ds):
            for j in range(ds):
                M[i, j] = jac[i, j] + (1.0 if i == j else 0.0)
                Fb[t, i, j] = M[i, j]
            for j in range(du):
                Fu[t, i, j] = jac[i, ds + j]
        # covariance block w.r.t. covariance: 0.5 (M (x) M)(I + K)
        for i in range(ds):
            for j in range(ds):
                r = ds + i * ds + j
                for k in range(ds):
                    for l in range(ds):
                        Fb[t, r, ds + k * ds + l] = 0.5 * (M[i, k] * M[j, l] + M[i, l] * M[j, k])
        # P = Sigma M^T
        for i in range(ds):
            for j in range(ds):
                acc = 0.0
                for k in range(ds):
                    acc += B[t, ds + i * ds + k] * M[j, k]
                P[i, j] = acc
        for k in range(dz):
            for o in range(ds):
                for p in range(ds):
                    acc = 0.0
                    for d in range(ds):
                        acc += hess[o, d, k] * P[d, p]
                    X[o, p] = acc
            for o in range(ds):
                for p in range(ds):
                    val = X[o, p] + X[p, o]
                    if o == p:
                        val += vgrad[o, k]
                    r = ds + o * ds + p
                    if k < ds:
                        Fb[t, r, k] = val
                    else:
                        Fu[t, r, k - ds] = val
    return Fb, Fu


@njit(cache=True)
def _cholesky(A, out):
    n = A.shape[0]
    for i in range(n):
        for j in range(i + 1):
            acc = A[i, j]
            for k in range(j):
                acc -= out[i, k] * out[j, k]
            if i == j:
                if not acc > 0.0:
                    return False
                out[i, i] = np.sqrt(acc)
            else:
                out[i, j] = acc / out[j, j]
        for j in range(i + 1, n):
            out[i, j] = 0.0
    return True


@njit(cache=True)
def _chol_solve(C, rhs):
    n, k = rhs.shape
    x = rhs.copy()
    for col in range(k):
        for i in range(n):
            acc = x[i, col]
            for j in range(i):
                acc -= C[i, j] * x[j, col]
            x[i, col] = acc / C[i, i]
        for i in range(n - 1, -1, -1):
            acc = x[i, col]
            for j in range(i + 1, n):
                acc -= C[j, i] * x[j, col]
            x[i, col] = acc / C[i, i]
    return x


@njit(cache=True, fastmath=True)
def backward(L0, Lb, Lu, Lbb, Lub, Luu, V0T, VbT, VbbT, Fb, Fu, reg):
    """Value recursion; returns ``fail_step`` >= 0 if Q_uu + reg I is not PD there."""
    T, nb, _ = Fb.shape
    nu = Fu.shape[2]
    kff = np.zeros((T, nu))
    Kfb = np.zeros((T, nu, nb))
    V0 = np.zeros(T + 1)
    Vb = np.zeros((T + 1, nb))
    Vbb = np.zeros((T + 1, nb, nb))
    V0[T] = V0T
    Vb[T] = VbT
    Vbb[T] = VbbT
    d1 = 0.0
    d2 = 0.0
    C = np.zeros((nu, nu))
    rhs = np.empty((nu, nb + 1))
    for t in range(T - 1, -1, -1):
        fb = Fb[t]
        fu = Fu[t]
        vbb = Vbb[t + 1]
        VbbFb = vbb @ fb
        Qb = Lb[t] + fb.T @ Vb[t + 1]
        Qu = Lu[t] + fu.T @ Vb[t + 1]
        Qbb = Lbb[t] + fb.T @ VbbFb
        Qub = Lub[t] + fu.T @ VbbFb
        Quu = Luu[t] + fu.T @ (vbb @ fu)
        Quu = 0.5 * (Quu + Quu.T)
        Qreg = Quu.copy()
        for i in range(nu):
            Qreg[i, i] += reg
        if not _cholesky(Qreg, C):
            return kff, Kfb, V0, Vb, Vbb, d1, d2, t
        rhs[:, 0] = Qu
        rhs[:, 1:] = Qub
        sol = _chol_solve(C, rhs)
        k = -sol[:, 0]
        K = -np.ascontiguousarray(sol[:, 1:])
        kff[t] = k
        Kfb[t] = K
        Quuk = Quu @ k
        QuuK = Quu @ K
        Vb[t] = Qb + K.T @ Quuk + K.T @ Qu + Qub.T @ k
        vv = Qbb + K.T @ QuuK + K.T @ Qub + Qub.T @ K
        Vbb[t] = 0.5 * (vv + vv.T)
        kQu = np.dot(k, Qu)
        kQk = np.dot(k, Quuk)
        d1 += kQu
        d2 += 0.5 * kQk
        V0[t] = L0[t] + V0[t + 1] + kQu + 0.5 * kQk
    return kff, Kfb, V0, Vb, Vbb, d1, d2, -1
