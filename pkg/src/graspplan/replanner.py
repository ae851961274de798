"""Online deviation replanner.

The collocation dynamics are linearized around the current optimal grid and
the deviation s_k = [δx_k, δv_k, δT_k] is found from a sparse LCQP with the
chain C_{k+1} s_{k+1} = A_k s_k.  Nodes before ``start`` are treated as
executed and left out of the problem.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .dynamics import reduced_dynamics_jacobians
from .errors import DeadlineError, ReplanInfeasibleError
from .planner import TrajectoryGrid
from .qp import active_set, interior_point, kkt_residual

DEFAULT_DT_BOUNDS = (0.0, 0.01)
DEFAULT_V_BOUND = 10.0     # rad/s², input box used for the deviation rows


def _spd(name, M):
    M = np.atleast_2d(np.asarray(M, float))
    if M.shape[0] != M.shape[1] or not np.allclose(M, M.T):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(M).min() <= 0:
        raise ValueError(f"{name} must be positive definite")
    return M


@dataclass(frozen=True)
class ReplanWeights:
    Q_x: np.ndarray = field(default_factory=lambda: np.diag([10.0] * 7 + [1.0] * 7))
    Q_v: np.ndarray = field(default_factory=lambda: 0.1 * np.eye(7))
    Q_dT: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "Q_x", _spd("Q_x", self.Q_x))
        object.__setattr__(self, "Q_v", _spd("Q_v", self.Q_v))
        if not self.Q_dT > 0:
            raise ValueError("Q_dT must be positive")
        if self.Q_x.shape[0] != 2 * self.Q_v.shape[0]:
            raise ValueError("Q_x must be twice the size of Q_v")

    @classmethod
    def for_dof(cls, n, qx=(10.0, 1.0), qv=0.1, qdt=1.0):
        return cls(np.diag([qx[0]] * n + [qx[1]] * n), qv * np.eye(n), qdt)

    def block(self):
        n = self.Q_v.shape[0]
        Q = np.zeros((3 * n + 1, 3 * n + 1))
        Q[:2 * n, :2 * n] = self.Q_x
        Q[2 * n:3 * n, 2 * n:3 * n] = self.Q_v
        Q[-1, -1] = self.Q_dT
        return Q


@dataclass(frozen=True)
class DeviationVector:
    dT: float
    dX: np.ndarray     # (N+1, 2n)
    dV: np.ndarray     # (N+1, n)
    objective: float = 0.0

    @classmethod
    def zero(cls, N, n=7):
        return cls(0.0, np.zeros((N + 1, 2 * n)), np.zeros((N + 1, n)))

    @property
    def is_zero(self):
        return self.dT == 0 and not np.any(self.dX) and not np.any(self.dV)


def linearize(grid):
    """Γ^x, Γ^v at every node; constant for the double integrator."""
    Gx, Gv = reduced_dynamics_jacobians(grid.ndof)
    K = grid.N + 1
    return np.broadcast_to(Gx, (K,) + Gx.shape).copy(), np.broadcast_to(Gv, (K,) + Gv.shape).copy()


@dataclass
class ReplanProblem:
    C: np.ndarray          # (M-1, nx+1, ns) blocks C_{k+1}
    A: np.ndarray          # (M-1, nx+1, ns) blocks A_k
    lo: np.ndarray         # (M, ns) with M = N + 1 - start
    hi: np.ndarray
    weights: ReplanWeights
    N: int
    start: int
    clamp_flag: bool = False

    @property
    def ns(self):
        return self.lo.shape[1]

    @property
    def n(self):
        return self.lo.size

    def matrices(self):
        """(H, E): diagonal-block Hessian and stacked equality rows E s = 0."""
        M, ns = self.lo.shape
        R = self.C.shape[1]
        Q = self.weights.block()
        w = np.zeros((M, ns, ns))
        w[1:-1] = Q          # endpoints carry no weight
        Hr, Hc = np.nonzero(np.ones((ns, ns)))
        base = (np.arange(M) * ns)[:, None]
        H = sp.csr_matrix((w.reshape(M, -1).ravel(), ((base + Hr).ravel(), (base + Hc).ravel())),
                          shape=(M * ns, M * ns))
        H.eliminate_zeros()
        rr, cc = np.nonzero(np.ones((R, ns)))
        rows, cols, vals = [], [], []
        for j in range(M - 1):
            rows += [j * R + rr, j * R + rr]
            cols += [(j + 1) * ns + cc, j * ns + cc]
            vals += [self.C[j].ravel(), -self.A[j].ravel()]
        E = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=((M - 1) * R, M * ns))
        E.eliminate_zeros()
        return H, E

    def reduced(self):
        """(H, E, lo, hi, T) after substituting the δT chain by one shared
        variable: s = T u with u = [δx, δv per node..., δT]."""
        M, ns = self.lo.shape
        R = self.C.shape[1]
        H, E = self.matrices()
        m = ns - 1
        nu = M * m + 1
        idx = np.arange(M * ns).reshape(M, ns)
        rows = np.concatenate([idx[:, :m].ravel(), idx[:, m]])
        cols = np.concatenate([np.arange(M * m), np.full(M, nu - 1)])
        T = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(M * ns, nu))
        keep = np.ones(E.shape[0], bool)
        keep[R - 1::R] = False        # chain rows vanish under the substitution
        Er = (E[keep] @ T).tocsr()
        Hr = (T.T @ H @ T).tocsr()
        lo = np.concatenate([self.lo[:, :m].ravel(), [self.lo[:, m].max()]])
        hi = np.concatenate([self.hi[:, :m].ravel(), [self.hi[:, m].min()]])
        return Hr, Er, lo, hi, T


def assemble(grid, x_S_new, x_T_new, weights=None, limits=None, dT_bounds=DEFAULT_DT_BOUNDS,
             start=0, v_bound=DEFAULT_V_BOUND):
    """Deviation LCQP over nodes start..N.

    Node ``start`` is pinned to x_S_new and node N to x_T_new (inputs pinned
    to their current values).  Boundary states outside the state box are
    clamped and flagged."""
    n = grid.ndof
    nx = 2 * n
    N = grid.N
    if not 0 <= start < N:
        raise ValueError("start node must lie in [0, N)")
    weights = weights or ReplanWeights.for_dof(n)
    x_max = limits.x_max if limits is not None else np.full(nx, np.inf)
    xs = np.clip(np.asarray(x_S_new, float), -x_max, x_max)
    xt = np.clip(np.asarray(x_T_new, float), -x_max, x_max)
    clamp = bool(np.any(xs != x_S_new) or np.any(xt != x_T_new))

    Gx, Gv = linearize(grid)
    h = grid.dt
    I = np.eye(nx)
    nodes = np.arange(start, N + 1)
    M = nodes.size
    ns = nx + n + 1
    C = np.zeros((M - 1, nx + 1, ns))
    A = np.zeros((M - 1, nx + 1, ns))
    for j, k in enumerate(nodes[:-1]):
        C[j, :nx, :nx] = I - 0.5 * h * Gx[k + 1]
        C[j, :nx, nx:nx + n] = -0.5 * h * Gv[k + 1]
        C[j, nx, -1] = 1.0
        A[j, :nx, :nx] = I + 0.5 * h * Gx[k]
        A[j, :nx, nx:nx + n] = 0.5 * h * Gv[k]
        A[j, :nx, -1] = (grid.X[k + 1] - grid.X[k]) / grid.dT
        A[j, nx, -1] = 1.0

    X = grid.X[nodes]
    V = grid.V[nodes]
    lo = np.empty((M, ns))
    hi = np.empty((M, ns))
    # a reference sitting on its bound must keep δ = 0 admissible
    lo[:, :nx] = np.minimum(-x_max - X, 0.0)
    hi[:, :nx] = np.maximum(x_max - X, 0.0)
    lo[:, nx:nx + n] = np.minimum(-v_bound - V, 0.0)
    hi[:, nx:nx + n] = np.maximum(v_bound - V, 0.0)
    lo[:, -1], hi[:, -1] = dT_bounds
    lo[0, :nx] = hi[0, :nx] = xs - X[0]
    lo[-1, :nx] = hi[-1, :nx] = xt - X[-1]
    lo[[0, -1], nx:nx + n] = hi[[0, -1], nx:nx + n] = 0.0
    if np.any(lo > hi):
        raise ReplanInfeasibleError("empty deviation box")
    return ReplanProblem(C, A, lo, hi, weights, N, start, clamp)


def solve(problem, deadline=100.0, state0=None):
    """Minimum-weight deviation; ``deadline`` in milliseconds (None disables it).

    Returns (DeviationVector, info) with info holding the KKT residual,
    iteration count, elapsed milliseconds and the working set."""
    t0 = time.perf_counter()
    lo, hi = problem.lo, problem.hi
    M, ns = lo.shape
    N, start = problem.N, problem.start
    nx = problem.C.shape[1] - 1
    n = ns - nx - 1
    if np.all(lo <= 0) and np.all(hi >= 0):
        # zero deviation is feasible and the objective is nonnegative
        info = dict(residual=0.0, iterations=0, solve_ms=1e3 * (time.perf_counter() - t0), state=None)
        return DeviationVector.zero(N, n), info
    H, E, lo_r, hi_r, T = problem.reduced()
    if np.any(lo_r > hi_r):
        raise ReplanInfeasibleError("empty duration band")
    nv = lo_r.size
    limit = None if deadline is None else t0 + 1e-3 * deadline
    res = active_set(H, np.zeros(nv), E, np.zeros(E.shape[0]), sp.identity(nv, format="csr"),
                     lo_r, hi_r, state0=state0, deadline=limit)
    if not res.converged and res.method != "deadline":
        # block pivoting can stall; the interior point is slower but robust
        res = interior_point(H, np.zeros(nv), E, np.zeros(E.shape[0]), sp.identity(nv, format="csr"),
                             lo_r, hi_r)
    elapsed = 1e3 * (time.perf_counter() - t0)
    if res.method == "deadline" or (deadline is not None and elapsed > deadline):
        raise DeadlineError(f"replan exceeded {deadline:.1f} ms", elapsed_ms=elapsed)
    if not res.converged:
        raise ReplanInfeasibleError("deviation QP has no feasible solution")
    # pinned entries come back within round-off of their bounds; make them exact
    s = np.clip(T @ res.x, lo.ravel(), hi.ravel()).reshape(M, ns)
    dX = np.zeros((N + 1, nx))
    dV = np.zeros((N + 1, n))
    dX[start:] = s[:, :nx]
    dV[start:] = s[:, nx:nx + n]
    obj = 0.5 * float(res.x @ (H @ res.x))
    info = dict(residual=res.residual, iterations=res.iterations, solve_ms=elapsed, state=res.state)
    # a single duration variable: the chain makes every δT_k equal
    return DeviationVector(float(s[:, -1].mean()), dX, dV, obj), info


def apply_update(grid, dev):
    """ξ* + δξ*; a zero deviation returns the grid itself."""
    if dev.is_zero:
        return grid
    return TrajectoryGrid(grid.dT + dev.dT, grid.X + dev.dX, grid.V + dev.dV)


def within_limits(grid, limits, tol=1e-9):
    return bool(np.all(np.abs(grid.X) <= limits.x_max + tol))


def qp_residual(problem, dev):
    """KKT residual of a returned deviation, with multipliers recovered by least
    squares.  Measured on the reduced problem: with every δT_k on a bound the
    chain multipliers of the full problem are not identifiable."""
    H, E, lo, hi, _ = problem.reduced()
    s = np.concatenate([np.hstack([dev.dX[problem.start:], dev.dV[problem.start:]]).ravel(),
                        [dev.dT]])
    g = H @ s
    tol = 1e-9
    act = (s <= lo + tol) | (s >= hi - tol)
    # stationarity on free variables: g_F + E_Fᵀ y = 0
    y = sp.linalg.lsqr(E[:, ~act].T, -g[~act], atol=1e-14, btol=1e-14, iter_lim=20000)[0]
    z = -(g + E.T @ y)
    z[~act] = 0.0
    return kkt_residual(H, np.zeros(s.size), E, np.zeros(E.shape[0]),
                        sp.identity(s.size, format="csr"), lo, hi, s, y, z)
