"""Sparse convex QP solvers.

All solvers treat

    min ½xᵀHx + cᵀx   s.t.  A x = b,  lo ≤ G x ≤ hi

and report signed row multipliers ``z`` with Hx + c + Aᵀy + Gᵀz = 0
(z > 0 at an active upper side, z < 0 at an active lower side).

``active_set`` is a primal-dual active-set iteration on equality-constrained
KKT systems, warm-startable from a previous working set; bulk updates switch to
single lowest-index changes when the working set repeats.  ``interior_point``
is a Mehrotra predictor-corrector method used as the robust fallback.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


@dataclass
class QPResult:
    x: np.ndarray
    y: np.ndarray          # equality multipliers
    z: np.ndarray          # signed row multipliers
    iterations: int
    converged: bool
    residual: float
    state: np.ndarray | None = None   # working set: -1 lower, 0 free, +1 upper
    method: str = ""


def _factor(K):
    return spla.splu(sp.csc_matrix(K), permc_spec="COLAMD")


def _as_inputs(H, c, A, b, G, lo, hi):
    H = sp.csr_matrix(H)
    n = H.shape[0]
    A = sp.csr_matrix(A) if A is not None else sp.csr_matrix((0, n))
    G = sp.csr_matrix(G) if G is not None else sp.csr_matrix((0, n))
    b = np.asarray(b if b is not None else np.zeros(0), float)
    lo = np.asarray(lo if lo is not None else np.zeros(0), float)
    hi = np.asarray(hi if hi is not None else np.zeros(0), float)
    return H, np.asarray(c, float), A, b, G, lo, hi


def kkt_residual(H, c, A, b, G, lo, hi, x, y, z):
    """Max of stationarity, primal infeasibility, complementarity and sign errors."""
    H, c, A, b, G, lo, hi = _as_inputs(H, c, A, b, G, lo, hi)
    stat = H @ x + c + A.T @ y + G.T @ z
    gx = G @ x
    infeas = max(np.abs(A @ x - b).max(initial=0.0),
                 np.maximum(gx - hi, 0).max(initial=0.0),
                 np.maximum(lo - gx, 0).max(initial=0.0))
    slack_hi = np.where(np.isfinite(hi), hi - gx, 0.0)
    slack_lo = np.where(np.isfinite(lo), gx - lo, 0.0)
    comp = np.maximum(np.maximum(z, 0) * slack_hi, np.maximum(-z, 0) * slack_lo)
    sign = np.maximum(np.where(np.isfinite(hi), 0.0, np.maximum(z, 0)),
                      np.where(np.isfinite(lo), 0.0, np.maximum(-z, 0)))
    return max(np.abs(stat).max(initial=0.0), infeas, np.abs(comp).max(initial=0.0),
               sign.max(initial=0.0))


def active_set(H, c, A, b, G, lo, hi, state0=None, tol=1e-9, max_iter=40, deadline=None):
    """``deadline`` is an absolute ``time.perf_counter()`` value; past it the
    iteration stops and returns an unconverged result with method "deadline"."""
    H, c, A, b, G, lo, hi = _as_inputs(H, c, A, b, G, lo, hi)
    n = H.shape[0]
    m = A.shape[0]
    r = G.shape[0]
    fixed = lo == hi
    state = np.zeros(r, dtype=np.int8)
    if state0 is not None:
        state[:] = state0
        state[(state < 0) & ~np.isfinite(lo)] = 0
        state[(state > 0) & ~np.isfinite(hi)] = 0
    state[fixed] = 1
    seen = set()
    single = False
    AT = A.T.tocsr()
    fail = QPResult(np.zeros(n), np.zeros(m), np.zeros(r), 0, False, np.inf, None, "active-set")
    for it in range(1, max_iter + 1):
        if deadline is not None and time.perf_counter() > deadline:
            return QPResult(np.zeros(n), np.zeros(m), np.zeros(r), it - 1, False, np.inf, None, "deadline")
        act = np.flatnonzero(state != 0)
        if act.size + m > n:
            return fail
        Ga = G[act]
        KKT = sp.bmat([[H, AT, Ga.T], [A, None, None], [Ga, None, None]], format="csc")
        rhs = np.concatenate([-c, b, np.where(state[act] > 0, hi[act], lo[act])])
        try:
            sol = _factor(KKT).solve(rhs)
        except RuntimeError:
            return fail
        if not np.all(np.isfinite(sol)) or \
                np.abs(KKT @ sol - rhs).max() > 1e-8 * (1.0 + np.abs(rhs).max()):
            return fail
        x = sol[:n]
        y = sol[n:n + m]
        z = np.zeros(r)
        z[act] = sol[n + m:]
        gx = G @ x
        wrong = np.flatnonzero(~fixed & (((state < 0) & (z > tol)) | ((state > 0) & (z < -tol))))
        viol_lo = np.flatnonzero((state == 0) & (gx < lo - tol))
        viol_hi = np.flatnonzero((state == 0) & (gx > hi + tol))
        if wrong.size == 0 and viol_lo.size == 0 and viol_hi.size == 0:
            lower = ~fixed & (state < 0)
            upper = ~fixed & (state > 0)
            z[lower] = np.minimum(z[lower], 0.0)
            z[upper] = np.maximum(z[upper], 0.0)
            res = kkt_residual(H, c, A, b, G, lo, hi, x, y, z)
            return QPResult(x, y, z, it, True, res, state.copy(), "active-set")
        key = state.tobytes()
        if key in seen:
            single = True
        seen.add(key)
        if single:
            i = int(np.concatenate([wrong, viol_lo, viol_hi]).min())
            state[i] = 0 if i in wrong else (-1 if i in viol_lo else 1)
        else:
            state[wrong] = 0
            state[viol_lo] = -1
            state[viol_hi] = 1
    return fail


def interior_point(H, c, A, b, G, lo, hi, tol=1e-10, max_iter=80, reg=1e-10):
    H, c, A, b, G, lo, hi = _as_inputs(H, c, A, b, G, lo, hi)
    n = H.shape[0]
    eq_rows = np.flatnonzero(lo == hi)
    up = np.flatnonzero((lo != hi) & np.isfinite(hi))
    dn = np.flatnonzero((lo != hi) & np.isfinite(lo))
    Ae = sp.vstack([A, G[eq_rows]], format="csr")
    be = np.concatenate([b, hi[eq_rows]])
    Gi = sp.vstack([G[up], -G[dn]], format="csr")
    hi_i = np.concatenate([hi[up], -lo[dn]])
    m_eq = Ae.shape[0]
    m_in = Gi.shape[0]

    x = np.zeros(n)
    ye = np.zeros(m_eq)
    s = np.maximum(hi_i - Gi @ x, 1.0)
    zi = np.ones(m_in)
    scale = 1.0 + max(np.abs(c).max(initial=0.0), np.abs(be).max(initial=0.0),
                      np.abs(hi_i).max(initial=0.0))
    GT = Gi.T.tocsr()
    AT = Ae.T.tocsr()
    I_n = sp.identity(n, format="csr")
    I_m = sp.identity(m_eq, format="csr")
    res = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        r_d = H @ x + c + AT @ ye + GT @ zi
        r_p = Ae @ x - be
        r_i = Gi @ x + s - hi_i
        mu = s @ zi / m_in if m_in else 0.0
        res = max(np.abs(r_d).max(initial=0.0), np.abs(r_p).max(initial=0.0),
                  np.abs(r_i).max(initial=0.0))
        if res <= tol * scale and mu <= tol:
            converged = True
            break
        w = zi / s
        Kxx = H + GT @ sp.diags(w) @ Gi + reg * I_n
        KKT = sp.bmat([[Kxx, AT], [Ae, -reg * I_m]], format="csc")
        try:
            lu = _factor(KKT)
        except RuntimeError:
            lu = _factor(KKT + sp.block_diag([1e-6 * I_n, -1e-6 * I_m]))

        def direction(r_c):
            rhs1 = -r_d - GT @ (r_c / s + w * r_i)
            sol = lu.solve(np.concatenate([rhs1, -r_p]))
            dx, dy = sol[:n], sol[n:]
            ds = -r_i - Gi @ dx
            dz = (r_c - zi * ds) / s
            return dx, dy, ds, dz

        dx, dy, ds, dz = direction(-s * zi)
        a_p = _max_step(s, ds)
        a_d = _max_step(zi, dz)
        mu_aff = (s + a_p * ds) @ (zi + a_d * dz) / m_in if m_in else 0.0
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        dx, dy, ds, dz = direction(-s * zi + sigma * mu - ds * dz)
        a_p = min(1.0, 0.995 * _max_step(s, ds, cap=np.inf))
        a_d = min(1.0, 0.995 * _max_step(zi, dz, cap=np.inf))
        x = x + a_p * dx
        s = s + a_p * ds
        ye = ye + a_d * dy
        zi = zi + a_d * dz

    m = A.shape[0]
    y = ye[:m]
    z = np.zeros(G.shape[0])
    z[eq_rows] = ye[m:]
    np.add.at(z, up, zi[:up.size])
    np.add.at(z, dn, -zi[up.size:])
    # working-set guess for warm starts
    state = np.zeros(G.shape[0], dtype=np.int8)
    thr = 1e-6 * (1.0 + np.abs(z).max(initial=0.0))
    state[(z > thr) & np.isfinite(hi)] = 1
    state[(z < -thr) & np.isfinite(lo)] = -1
    state[eq_rows] = 1
    return QPResult(x, y, z, it, converged, res, state, "interior-point")


def _max_step(v, dv, cap=1.0):
    neg = dv < 0
    if not np.any(neg):
        return cap
    return min(cap, float(np.min(-v[neg] / dv[neg])))


def solve_qp(H, c, A, b, G, lo, hi, state0=None, tol=1e-9, prefer="active-set"):
    """Active-set solve (warm-started from ``state0``) with interior-point fallback."""
    if prefer in ("active-set", "active-set-only"):
        res = active_set(H, c, A, b, G, lo, hi, state0=state0, tol=tol)
        if res.converged or prefer == "active-set-only":
            return res
    return interior_point(H, c, A, b, G, lo, hi, tol=min(tol, 1e-10))


def box_qp(H, c, A, b, lo, hi, state0=None, tol=1e-9):
    n = sp.csr_matrix(H).shape[0]
    return solve_qp(H, c, A, b, sp.identity(n, format="csr"), lo, hi, state0=state0, tol=tol)
