"""Sparse SQP with an l1 merit line search.

The problem object provides

    n, lb, ub, g_lo, g_hi
    values(x)      -> (f, c, g)            objective, equalities, inequalities
    derivs(x)      -> (grad, Jc, Jg)       gradient and sparse Jacobians
    hessian(x, y, z) -> sparse n×n         Lagrangian Hessian approximation

with constraints c(x) = 0, g_lo ≤ g(x) ≤ g_hi and lb ≤ x ≤ ub.
Multipliers follow L = f + yᵀc + zᵀg + wᵀx, signed like qp.QPResult.z.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import NonConvergenceError
from .qp import solve_qp


@dataclass
class SQPResult:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    w: np.ndarray
    f: float
    iterations: int
    residuals: dict
    wall_ms: float
    history: list = field(default_factory=list)


def _violation(prob, c, g, x):
    v = np.abs(c).sum()
    v += np.maximum(g - prob.g_hi, 0).sum() + np.maximum(prob.g_lo - g, 0).sum()
    v += np.maximum(x - prob.ub, 0).sum() + np.maximum(prob.lb - x, 0).sum()
    return v


def _max_violation(prob, c, g, x):
    return max(np.abs(c).max(initial=0.0),
               np.maximum(g - prob.g_hi, 0).max(initial=0.0),
               np.maximum(prob.g_lo - g, 0).max(initial=0.0),
               np.maximum(x - prob.ub, 0).max(initial=0.0),
               np.maximum(prob.lb - x, 0).max(initial=0.0))


def _complementarity(lo, hi, val, mult):
    fin_hi = np.isfinite(hi)
    fin_lo = np.isfinite(lo)
    up = np.maximum(mult, 0)
    dn = np.maximum(-mult, 0)
    # multipliers on an absent side are errors in their own right
    up = np.where(fin_hi, up * np.abs(np.where(fin_hi, hi, 0) - val), up)
    dn = np.where(fin_lo, dn * np.abs(val - np.where(fin_lo, lo, 0)), dn)
    return max(up.max(initial=0.0), dn.max(initial=0.0))


def kkt_residuals(prob, x, y, z, w, grad=None, Jc=None, Jg=None, vals=None):
    if grad is None:
        grad, Jc, Jg = prob.derivs(x)
    f, c, g = vals if vals is not None else prob.values(x)
    stat = grad + Jc.T @ y + Jg.T @ z + w
    return {
        "stationarity": float(np.abs(stat).max(initial=0.0)),
        "feasibility": float(_max_violation(prob, c, g, x)),
        "complementarity": float(max(_complementarity(prob.g_lo, prob.g_hi, g, z),
                                     _complementarity(prob.lb, prob.ub, x, w))),
    }


def solve(prob, x0, tol=1e-6, max_iter=100, hess_reg=1e-8, verbose=False):
    t0 = time.perf_counter()
    n = prob.n
    x = np.asarray(x0, float).copy()
    bounded = np.flatnonzero(np.isfinite(prob.lb) | np.isfinite(prob.ub))
    Ib = sp.csr_matrix((np.ones(bounded.size), (np.arange(bounded.size), bounded)),
                       shape=(bounded.size, n))
    m_g = len(prob.g_lo)
    y = np.zeros(0)
    z = np.zeros(m_g)
    w = np.zeros(n)
    state = None
    convex = getattr(prob, "hessian_convex", None)
    nu = 1.0
    reg = hess_reg
    history = []
    vals = prob.values(x)
    res = {}
    for it in range(max_iter + 1):
        f, c, g = vals
        grad, Jc, Jg = prob.derivs(x)
        if y.size != c.size:
            y = np.zeros(c.size)
        B = prob.hessian(x, y, z) + reg * sp.identity(n, format="csr")
        G = sp.vstack([Jg, Ib], format="csr")
        lo = np.concatenate([prob.g_lo - g, prob.lb[bounded] - x[bounded]])
        hi = np.concatenate([prob.g_hi - g, prob.ub[bounded] - x[bounded]])
        qp = solve_qp(B, grad, Jc, -c, G, lo, hi, state0=state, prefer="active-set-only")
        if (not qp.converged or qp.x @ (B @ qp.x) < 0) and convex is not None:
            # exact curvature unusable here: retry on the convexified model
            B = convex(x, y, z) + reg * sp.identity(n, format="csr")
            qp = solve_qp(B, grad, Jc, -c, G, lo, hi, state0=state, prefer="active-set-only")
        if not qp.converged:
            reg = max(10 * reg, 1e-6)
            state = None
            qp = solve_qp(B + reg * sp.identity(n), grad, Jc, -c, G, lo, hi, prefer="interior-point")
        d = qp.x
        y_new, z_new = qp.y, qp.z[:m_g]
        w_new = np.zeros(n)
        w_new[bounded] = qp.z[m_g:]
        state = qp.state
        res = kkt_residuals(prob, x, y_new, z_new, w_new, grad, Jc, Jg, vals)
        history.append(dict(it=it, f=f, **res, step=float(np.abs(d).max(initial=0.0)),
                            qp=qp.method, qp_iter=qp.iterations))
        if verbose:
            print(history[-1])
        if max(res.values()) < tol:
            y, z, w = y_new, z_new, w_new
            return SQPResult(x, y, z, w, f, it, res, 1e3 * (time.perf_counter() - t0), history)
        if it == max_iter:
            break

        mult = max(np.abs(y_new).max(initial=0.0), np.abs(z_new).max(initial=0.0))
        # Powell's update lets the penalty relax after early large multipliers
        nu = max(1.1 * mult, 0.5 * (nu + 1.1 * mult), 1e-3)
        viol = _violation(prob, c, g, x)
        phi = f + nu * viol
        dBd = float(d @ (B @ d))
        D = grad @ d - nu * viol
        if D > -1e-14 * (1 + abs(phi)):
            D = min(D, -0.5 * max(dBd, 0.0))
        alpha = 1.0
        accepted = False
        while alpha > 1e-10:
            xt = x + alpha * d
            vt = prob.values(xt)
            phit = vt[0] + nu * _violation(prob, vt[1], vt[2], xt)
            if phit <= phi + 1e-4 * alpha * D or abs(phit - phi) < 1e-14 * (1 + abs(phi)):
                accepted = True
                break
            if alpha == 1.0:
                # second-order correction against the Maratos effect
                lo_s = np.concatenate([prob.g_lo - vt[2] + Jg @ d, prob.lb[bounded] - x[bounded]])
                hi_s = np.concatenate([prob.g_hi - vt[2] + Jg @ d, prob.ub[bounded] - x[bounded]])
                qs = solve_qp(B, grad, Jc, -(vt[1] - Jc @ d), G, lo_s, hi_s, state0=state)
                if qs.converged:
                    xs = x + qs.x
                    vs = prob.values(xs)
                    phis = vs[0] + nu * _violation(prob, vs[1], vs[2], xs)
                    if phis <= phi + 1e-4 * D:
                        xt, vt = xs, vs
                        accepted = True
                        break
            alpha *= 0.5
        if not accepted:
            reg = max(10 * reg, 1e-6)
            continue
        history[-1].update(alpha=alpha, dBd=dBd, nu=nu, reg=reg)
        reg = max(hess_reg, 0.3 * reg)
        x = xt
        vals = vt
        y, z, w = y_new, z_new, w_new
    raise NonConvergenceError(
        f"SQP did not converge in {max_iter} iterations "
        f"(stationarity {res.get('stationarity', np.nan):.2e}, "
        f"feasibility {res.get('feasibility', np.nan):.2e})",
        residuals=res,
        result=SQPResult(x, y, z, w, vals[0], max_iter, res, 1e3 * (time.perf_counter() - t0), history),
    )
