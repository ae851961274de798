"""Compiled kinematics and rigid-body dynamics kernels.

All routines work in world coordinates and accept either float64 or complex128
joint vectors; the complex path is used for complex-step differentiation.
The arm description is passed as plain arrays:

    fixed    (7, 4, 4)  constant part of each joint transform (before Rz(q_i))
    mass     (7,)
    com      (7, 3)     centre of mass in the link frame
    inertia  (7, 3, 3)  inertia about the centre of mass, link frame
    gravity  (3,)
"""
import numpy as np
from numba import njit

NDOF = 7


# small dense products written out: BLAS call overhead dominates at 3x3 and 4x4

@njit(cache=True, inline="always")
def _mm(A, B):
    n, m, p = A.shape[0], A.shape[1], B.shape[1]
    C = np.zeros((n, p), dtype=A.dtype)
    for i in range(n):
        for k in range(m):
            a = A[i, k]
            for j in range(p):
                C[i, j] += a * B[k, j]
    return C


@njit(cache=True, inline="always")
def _mv(A, x):
    y = np.zeros(A.shape[0], dtype=A.dtype)
    for i in range(A.shape[0]):
        for k in range(A.shape[1]):
            y[i] += A[i, k] * x[k]
    return y


@njit(cache=True, inline="always")
def _conj(R, I):
    """R I Rᵀ."""
    return _mm(_mm(R, I), R.T.copy())



@njit(cache=True)
def chain(q, fixed):
    """World transforms of frames 0..7 (frame 0 is the base)."""
    T = np.zeros((NDOF + 1, 4, 4), dtype=q.dtype)
    for i in range(4):
        T[0, i, i] = 1.0
    for i in range(NDOF):
        c = np.cos(q[i])
        s = np.sin(q[i])
        rz = np.zeros((4, 4), dtype=q.dtype)
        rz[0, 0] = c
        rz[0, 1] = -s
        rz[1, 0] = s
        rz[1, 1] = c
        rz[2, 2] = 1.0
        rz[3, 3] = 1.0
        step = _mm(fixed[i].astype(q.dtype), rz)
        T[i + 1] = _mm(T[i], step)
    return T


@njit(cache=True)
def _cross(a, b):
    out = np.empty(3, dtype=a.dtype)
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]
    return out


@njit(cache=True)
def point_jacobian(T, p):
    """Translational Jacobian (3x7) of a point p rigidly attached to link 7."""
    J = np.zeros((3, NDOF), dtype=T.dtype)
    for i in range(NDOF):
        z = T[i + 1, :3, 2].copy()
        o = T[i + 1, :3, 3].copy()
        J[:, i] = _cross(z, p - o)
    return J


@njit(cache=True)
def angular_jacobian(T):
    J = np.zeros((3, NDOF), dtype=T.dtype)
    for i in range(NDOF):
        J[:, i] = T[i + 1, :3, 2]
    return J


@njit(cache=True)
def rnea(q, qd, qdd, fixed, mass, com, inertia, gravity):
    """Inverse dynamics tau = M(q) qdd + C(q, qd) qd + g(q)."""
    dt = q.dtype
    qd = qd.astype(dt)
    qdd = qdd.astype(dt)
    T = chain(q, fixed)
    w = np.zeros(3, dtype=dt)
    al = np.zeros(3, dtype=dt)
    a = np.zeros(3, dtype=dt)
    for k in range(3):
        a[k] = -gravity[k]
    o_prev = np.zeros(3, dtype=dt)
    Fs = np.zeros((NDOF, 3), dtype=dt)
    Ns = np.zeros((NDOF, 3), dtype=dt)
    rc = np.zeros((NDOF, 3), dtype=dt)
    origins = np.zeros((NDOF + 1, 3), dtype=dt)
    zs = np.zeros((NDOF, 3), dtype=dt)
    for i in range(NDOF):
        R = T[i + 1, :3, :3].copy()
        o = T[i + 1, :3, 3].copy()
        z = R[:, 2].copy()
        d = o - o_prev
        # origin of frame i+1 is fixed on the previous link
        a = a + _cross(al, d) + _cross(w, _cross(w, d))
        w_new = w + z * qd[i]
        al = al + z * qdd[i] + _cross(w, z * qd[i])
        w = w_new
        r = _mv(R, com[i].astype(dt))
        ac = a + _cross(al, r) + _cross(w, _cross(w, r))
        Iw = _conj(R, inertia[i].astype(dt))
        Fs[i] = mass[i] * ac
        Ns[i] = _mv(Iw, al) + _cross(w, _mv(Iw, w))
        rc[i] = r
        origins[i] = o
        zs[i] = z
        o_prev = o
    tau = np.zeros(NDOF, dtype=dt)
    f = np.zeros(3, dtype=dt)
    n = np.zeros(3, dtype=dt)
    for i in range(NDOF - 1, -1, -1):
        if i < NDOF - 1:
            lever = origins[i + 1] - origins[i]
        else:
            lever = np.zeros(3, dtype=dt)
        n = Ns[i] + n + _cross(rc[i], Fs[i]) + _cross(lever, f)
        f = Fs[i] + f
        tau[i] = zs[i, 0] * n[0] + zs[i, 1] * n[1] + zs[i, 2] * n[2]
    return tau


@njit(cache=True)
def crba(q, fixed, mass, com, inertia):
    """Joint-space mass matrix by composite rigid bodies."""
    dt = q.dtype
    T = chain(q, fixed)
    cw = np.zeros((NDOF, 3), dtype=dt)
    Iw = np.zeros((NDOF, 3, 3), dtype=dt)
    for i in range(NDOF):
        R = T[i + 1, :3, :3].copy()
        cw[i] = T[i + 1, :3, 3] + _mv(R, com[i].astype(dt))
        Iw[i] = _conj(R, inertia[i].astype(dt))
    # composite bodies j..6 by backward recursion: mass, centre of mass and
    # inertia about that centre (parallel-axis shifts of both parts)
    mc = np.zeros(NDOF, dtype=dt)
    cc = np.zeros((NDOF, 3), dtype=dt)
    Ic = np.zeros((NDOF, 3, 3), dtype=dt)
    mc[NDOF - 1] = mass[NDOF - 1]
    cc[NDOF - 1] = cw[NDOF - 1]
    Ic[NDOF - 1] = Iw[NDOF - 1]
    for j in range(NDOF - 2, -1, -1):
        m1 = mc[j + 1]
        m0 = mass[j]
        m = m0 + m1
        mc[j] = m
        for a in range(3):
            cc[j, a] = (m1 * cc[j + 1, a] + m0 * cw[j, a]) / m
        for part in range(2):
            if part == 0:
                mk = m1
            else:
                mk = m0
            rr = 0.0 * cc[j, 0]
            r = np.zeros(3, dtype=dt)
            for a in range(3):
                if part == 0:
                    r[a] = cc[j + 1, a] - cc[j, a]
                else:
                    r[a] = cw[j, a] - cc[j, a]
                rr = rr + r[a] * r[a]
            for a in range(3):
                for b in range(3):
                    if part == 0:
                        v = Ic[j + 1, a, b]
                    else:
                        v = Iw[j, a, b]
                    v = v - mk * r[a] * r[b]
                    if a == b:
                        v = v + mk * rr
                    Ic[j, a, b] = Ic[j, a, b] + v
    M = np.zeros((NDOF, NDOF), dtype=dt)
    for i in range(NDOF):
        zi = T[i + 1, :3, 2].copy()
        oi = T[i + 1, :3, 3].copy()
        for j in range(i, NDOF):
            zj = T[j + 1, :3, 2].copy()
            oj = T[j + 1, :3, 3].copy()
            F = mc[j] * _cross(zi, cc[j] - oi)
            n = _mv(Ic[j], zi) + _cross(cc[j] - oj, F)
            val = zj[0] * n[0] + zj[1] * n[1] + zj[2] * n[2]
            M[i, j] = val
            M[j, i] = val
    return M


@njit(cache=True)
def forward_dynamics(q, qd, tau, fixed, mass, com, inertia, gravity):
    zero = np.zeros(NDOF)
    bias = rnea(q, qd, zero, fixed, mass, com, inertia, gravity)
    M = crba(q, fixed, mass, com, inertia)
    return np.linalg.solve(M, tau - bias)


@njit(cache=True)
def rk4_step(q, qd, tau, h, fixed, mass, com, inertia, gravity):
    """One RK4 step of the full rigid-body model under constant torque."""
    k1q = qd
    k1v = forward_dynamics(q, qd, tau, fixed, mass, com, inertia, gravity)
    q2 = q + 0.5 * h * k1q
    v2 = qd + 0.5 * h * k1v
    k2q = v2
    k2v = forward_dynamics(q2, v2, tau, fixed, mass, com, inertia, gravity)
    q3 = q + 0.5 * h * k2q
    v3 = qd + 0.5 * h * k2v
    k3q = v3
    k3v = forward_dynamics(q3, v3, tau, fixed, mass, com, inertia, gravity)
    q4 = q + h * k3q
    v4 = qd + h * k3v
    k4q = v4
    k4v = forward_dynamics(q4, v4, tau, fixed, mass, com, inertia, gravity)
    qn = q + h / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
    vn = qd + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    return qn, vn


@njit(cache=True)
def torque_band_terms(Q, V, fixed, mass, com, inertia, gravity):
    """Per node M(q)v + g(q), its q-Jacobian (complex step) and M(q)."""
    K = Q.shape[0]
    tau = np.zeros((K, NDOF))
    dtdq = np.zeros((K, NDOF, NDOF))
    Ms = np.zeros((K, NDOF, NDOF))
    zero = np.zeros(NDOF, dtype=np.complex128)
    h = 1e-30
    for k in range(K):
        q = Q[k].copy()
        v = V[k].copy()
        tau[k] = rnea(q, np.zeros(NDOF), v, fixed, mass, com, inertia, gravity)
        Ms[k] = crba(q, fixed, mass, com, inertia)
        vc = v.astype(np.complex128)
        for j in range(NDOF):
            qc = q.astype(np.complex128)
            qc[j] = qc[j] + 1j * h
            tc = rnea(qc, zero, vc, fixed, mass, com, inertia, gravity)
            for i in range(NDOF):
                dtdq[k, i, j] = tc[i].imag / h
    return tau, dtdq, Ms


@njit(cache=True)
def mass_matrix_derivatives(q, fixed, mass, com, inertia):
    """dM/dq_k stacked as (7, 7, 7) with the derivative index first."""
    dM = np.zeros((NDOF, NDOF, NDOF))
    h = 1e-30
    for k in range(NDOF):
        qc = q.astype(np.complex128)
        qc[k] = qc[k] + 1j * h
        Mc = crba(qc, fixed, mass, com, inertia)
        for i in range(NDOF):
            for j in range(NDOF):
                dM[k, i, j] = Mc[i, j].imag / h
    return dM


@njit(cache=True)
def tool_points(Q, fixed, tool, point):
    """World position and 3x7 Jacobian of a point fixed in a tool frame, per node."""
    K = Q.shape[0]
    P = np.zeros((K, 3))
    J = np.zeros((K, 3, NDOF))
    for k in range(K):
        T = chain(Q[k].copy(), fixed)
        H = _mm(T[NDOF], tool)
        p = _mv(H[:3, :3], point) + H[:3, 3]
        P[k] = p
        J[k] = point_jacobian(T, p)
    return P, J
