"""Three-phase free-final-time trajectory planning by trapezoidal collocation.

Decision vector layout per phase: ξ = [ΔT, x_0, ..., x_N, v_0, ..., v_N] with
x_k = [q_k; qdot_k] and v_k the virtual joint acceleration.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import _kernels as K
from . import sqp
from .dynamics import CoriolisEnvelope, torque_band
from .errors import GripperLimitError, SpecError, UnreachableError
from .model import (GRIPPER_Q_MAX, NDOF, PREGRASP, GraspState, Pose, forward_kinematics,
                    frame_transform, inverse_kinematics, position_jacobian, rot3,
                    rotation_angle, sdh2_forward, sdh2_inverse)

DT_BOUNDS = (0.1, 60.0)


# --------------------------------------------------------------------------
# trajectory container

@dataclass(frozen=True)
class TrajectoryGrid:
    dT: float
    X: np.ndarray   # (N+1, 2n)
    V: np.ndarray   # (N+1, n)

    def __post_init__(self):
        X = np.asarray(self.X, float)
        V = np.asarray(self.V, float)
        if X.ndim != 2 or V.ndim != 2 or X.shape[0] != V.shape[0] or X.shape[1] != 2 * V.shape[1]:
            raise ValueError("grid needs X of shape (N+1, 2n) and V of shape (N+1, n)")
        if not self.dT > 0:
            raise ValueError("phase duration must be positive")
        object.__setattr__(self, "dT", float(self.dT))
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "V", V)

    @property
    def N(self):
        return self.X.shape[0] - 1

    @property
    def ndof(self):
        return self.V.shape[1]

    @property
    def dt(self):
        return self.dT / self.N

    @property
    def Q(self):
        return self.X[:, :self.ndof]

    @property
    def QD(self):
        return self.X[:, self.ndof:]

    @property
    def times(self):
        return np.linspace(0.0, self.dT, self.N + 1)

    def vector(self):
        return np.concatenate([[self.dT], self.X.ravel(), self.V.ravel()])

    @classmethod
    def from_vector(cls, xi, N, n=NDOF):
        xi = np.asarray(xi, float)
        nx = 2 * n
        X = xi[1:1 + (N + 1) * nx].reshape(N + 1, nx)
        V = xi[1 + (N + 1) * nx:].reshape(N + 1, n)
        return cls(xi[0], X, V)

    def collocation_residual(self):
        F = np.hstack([self.QD, self.V])
        return self.X[1:] - self.X[:-1] - 0.5 * self.dt * (F[1:] + F[:-1])

    def objective(self):
        return self.dT + self.dt * float(np.sum(self.V ** 2))

    def sample(self, t):
        """(q, qdot, v) at phase time t; quadratic states, linear input."""
        n = self.ndof
        h = self.dt
        t = min(max(t, 0.0), self.dT)
        k = min(int(t / h), self.N - 1)
        tau = t - k * h
        F0 = np.concatenate([self.QD[k], self.V[k]])
        F1 = np.concatenate([self.QD[k + 1], self.V[k + 1]])
        x = self.X[k] + F0 * tau + (F1 - F0) * tau * tau / (2 * h)
        v = self.V[k] + (self.V[k + 1] - self.V[k]) * tau / h
        return x[:n], x[n:], v


# --------------------------------------------------------------------------
# potential corridor and lift condition

@dataclass(frozen=True)
class PotentialField:
    z_th: float
    mu: np.ndarray = field(default_factory=lambda: np.zeros(2))
    Sigma: np.ndarray = field(default_factory=lambda: np.diag([5e-3, 2e-3]))
    frame: Pose = field(default_factory=Pose.identity)   # O_p in world coordinates

    def __post_init__(self):
        if not self.z_th > 0:
            raise ValueError("z_th must be positive")
        S = np.asarray(self.Sigma, float)
        if S.shape != (2, 2) or not np.allclose(S, S.T) or np.linalg.eigvalsh(S).min() <= 0:
            raise ValueError("Sigma must be a 2x2 SPD matrix")
        object.__setattr__(self, "Sigma", S)
        object.__setattr__(self, "mu", np.asarray(self.mu, float).reshape(2))
        object.__setattr__(self, "Sigma_inv", np.linalg.inv(S))


def potential_value(field, x, y):
    d = np.array([x, y]) - field.mu
    return field.z_th * (1.0 - np.exp(-0.5 * d @ field.Sigma_inv @ d))


def _potential_rows(field, P, J):
    """h and dh/dq per node from world grasp points P (K,3) and Jacobians J (K,3,n)."""
    R = field.frame.rotation
    Gp = (P - field.frame.translation) @ R
    d = Gp[:, :2] - field.mu
    Sd = d @ field.Sigma_inv
    e = np.exp(-0.5 * np.sum(d * Sd, axis=1))
    h = Gp[:, 2] - field.z_th * (1.0 - e)
    dh_dGp = np.column_stack([-field.z_th * e[:, None] * Sd, np.ones(len(h))])
    # Gp = Rᵀ(P - o) so dGp/dq = Rᵀ J
    dh = np.einsum("ka,ba,kbj->kj", dh_dGp, R, J)
    return h, dh


def potential_clearance(field, model, gripper, q):
    Gh = sdh2_forward(gripper)
    H = frame_transform(model, q, "hand")
    G = H[:3, :3] @ Gh + H[:3, 3]
    Gp = field.frame.rotation.T @ (G - field.frame.translation)
    return float(Gp[2] - potential_value(field, Gp[0], Gp[1]))


def lift_velocity(model, state):
    J = position_jacobian(model, state.q, "hand")
    return float(J[2] @ state.qdot)


def _lift_row(model, q, qd):
    """Lift velocity and its gradient with respect to (q, qdot)."""
    tool = model.tools["hand"]
    T = K.chain(q, model.fixed)
    p = (T[NDOF] @ tool)[:3, 3]
    J = K.point_jacobian(T, p)
    val = J[2] @ qd
    dq = np.zeros(NDOF)
    h = 1e-30
    toolc = tool.astype(np.complex128)
    for j in range(NDOF):
        qc = q.astype(np.complex128)
        qc[j] += 1j * h
        Tc = K.chain(qc, model.fixed)
        pc = (Tc[NDOF] @ toolc)[:3, 3]
        dq[j] = (K.point_jacobian(Tc, pc)[2] @ qd).imag / h
    return val, dq, J[2]


# --------------------------------------------------------------------------
# phase specification and transcription

@dataclass(frozen=True)
class PhaseSpec:
    phase: int
    x_start: np.ndarray
    x_target: np.ndarray
    N: int = 100
    field: PotentialField | None = None
    gripper: np.ndarray | None = None         # q_h used for the potential rows
    lift: bool = False
    terminal_velocity_free: bool = False
    dT_bounds: tuple = DT_BOUNDS

    def __post_init__(self):
        if self.phase not in (1, 2, 3):
            raise SpecError("phase index must be 1, 2 or 3")
        if self.N < 1:
            raise SpecError("N must be >= 1")
        xs = np.asarray(self.x_start, float)
        xt = np.asarray(self.x_target, float)
        if xs.shape != xt.shape or xs.ndim != 1 or xs.size % 2:
            raise SpecError("boundary states must be equal-length 2n vectors")
        object.__setattr__(self, "x_start", xs)
        object.__setattr__(self, "x_target", xt)
        if self.phase == 1 and self.field is None:
            raise SpecError("phase 1 needs a potential field")
        if self.phase == 2 and not self.lift:
            raise SpecError("phase 2 carries the lift condition")
        if self.phase == 3 and (self.terminal_velocity_free or np.any(xt[xt.size // 2:] != 0)):
            raise SpecError("phase 3 target must be stationary")
        lo, hi = self.dT_bounds
        if not 0 < lo <= hi:
            raise SpecError("invalid duration bounds")


class CollocationNLP:
    """Sparse transcription of one phase; consumed by ``sqp.solve``."""

    def __init__(self, spec, model, limits, env=None):
        self.spec = spec
        self.dT_curvature = 1.0
        self.model = model
        n = spec.x_start.size // 2
        self.nq = n
        self.nx = nx = 2 * n
        self.N = N = spec.N
        self.n = 1 + (N + 1) * (nx + n)
        q_max = np.asarray(limits.q_max, float)
        qd_max = np.asarray(limits.qdot_max, float)
        if q_max.shape != (n,) or qd_max.shape != (n,):
            raise SpecError("limits do not match the state dimension")
        x_max = np.concatenate([q_max, qd_max])
        for name, xb in (("start", spec.x_start), ("target", spec.x_target)):
            if np.any(np.abs(xb) > x_max + 1e-12):
                raise SpecError(f"{name} state outside the joint limits")

        lb = np.full(self.n, -np.inf)
        ub = np.full(self.n, np.inf)
        lb[0], ub[0] = spec.dT_bounds
        xs = slice(1, 1 + (N + 1) * nx)
        lb[xs] = np.tile(-x_max, N + 1)
        ub[xs] = np.tile(x_max, N + 1)
        lb[self.ix(0)] = ub[self.ix(0)] = spec.x_start
        if spec.terminal_velocity_free:
            iq = self.ix(N)[:n]
            lb[iq] = ub[iq] = spec.x_target[:n]
        else:
            lb[self.ix(N)] = ub[self.ix(N)] = spec.x_target
        self.lb, self.ub = lb, ub

        g_lo, g_hi = [], []
        self.use_torque = model is not None and limits is not None and hasattr(limits, "tau_max")
        if self.use_torque:
            env = env or CoriolisEnvelope.zero(n)
            band_lo, band_hi = torque_band(limits, env)
            self.tau_scale = np.asarray(limits.tau_max, float)
            g_lo.append(np.tile(band_lo / self.tau_scale, N + 1))
            g_hi.append(np.tile(band_hi / self.tau_scale, N + 1))
        self.use_potential = spec.field is not None and model is not None
        if self.use_potential:
            g_lo.append(np.zeros(N + 1))
            g_hi.append(np.full(N + 1, np.inf))
            q_h = spec.gripper if spec.gripper is not None else sdh2_inverse(PREGRASP)
            self.grasp_point = sdh2_forward(q_h)
            self.hand_tool = model.tools["hand"]
        self.use_lift = spec.lift and model is not None
        if self.use_lift:
            g_lo.append(np.zeros(1))
            g_hi.append(np.full(1, np.inf))
        self.g_lo = np.concatenate(g_lo) if g_lo else np.zeros(0)
        self.g_hi = np.concatenate(g_hi) if g_hi else np.zeros(0)
        self._build_patterns()

    # index helpers
    def ix(self, k):
        s = 1 + k * self.nx
        return np.arange(s, s + self.nx)

    def iv(self, k):
        s = 1 + (self.N + 1) * self.nx + k * self.nq
        return np.arange(s, s + self.nq)

    def split(self, xi):
        X = xi[1:1 + (self.N + 1) * self.nx].reshape(self.N + 1, self.nx)
        V = xi[1 + (self.N + 1) * self.nx:].reshape(self.N + 1, self.nq)
        return xi[0], X, V

    def _build_patterns(self):
        n, nx, N = self.nq, self.nx, self.N
        k = np.repeat(np.arange(N), nx)
        j = np.tile(np.arange(nx), N)
        r = k * nx + j
        x0 = 1 + k * nx + j
        x1 = x0 + nx
        # the qdot column for q rows, the v column for qdot rows
        is_q = j < n
        f0 = np.where(is_q, 1 + k * nx + n + j, 1 + (N + 1) * nx + k * n + (j - n))
        f1 = np.where(is_q, f0 + nx, f0 + n)
        self._dyn_rows = np.concatenate([r, r, r, r, r])
        self._dyn_cols = np.concatenate([x0, x1, f0, f1, np.zeros_like(r)])
        self._dyn_shape = (N * nx, self.n)
        self._g_parts = []
        row = 0
        if self.use_torque:
            kk = np.repeat(np.arange(N + 1), n * 2 * n)
            ii = np.tile(np.repeat(np.arange(n), 2 * n), N + 1)
            cc = np.tile(np.arange(2 * n), n * (N + 1))
            qcol = 1 + kk * nx + cc
            vcol = 1 + (N + 1) * nx + kk * n + (cc - n)
            cols = np.where(cc < n, qcol, vcol)
            self._tau_rows = row + kk * n + ii
            self._tau_cols = cols
            row += (N + 1) * n
        if self.use_potential:
            kk = np.repeat(np.arange(N + 1), n)
            self._pot_rows = row + kk
            self._pot_cols = 1 + kk * nx + np.tile(np.arange(n), N + 1)
            row += N + 1
        if self.use_lift:
            self._lift_row_index = row
            self._lift_cols = np.concatenate([self.ix(N)])
            row += 1
        self.m_g = row

    # ----- problem interface
    def values(self, xi):
        dT, X, V = self.split(xi)
        n, N = self.nq, self.N
        f = dT + dT / N * float(np.sum(V * V))
        F = np.hstack([X[:, n:], V])
        c = (X[1:] - X[:-1] - 0.5 * dT / N * (F[1:] + F[:-1])).ravel()
        return f, c, self._ineq(X, V, derivs=False)[0]

    def _ineq(self, X, V, derivs):
        n = self.nq
        Q = np.ascontiguousarray(X[:, :n])
        vals, jac = [], []
        if self.use_torque:
            if derivs:
                tau, dtdq, Ms = K.torque_band_terms(Q, np.ascontiguousarray(V), *self.model.dyn_args)
                blk = np.concatenate([dtdq, Ms], axis=2) / self.tau_scale[None, :, None]
                jac.append(blk.ravel())
            else:
                zero = np.zeros(n)
                tau = np.array([K.rnea(q, zero, v, *self.model.dyn_args) for q, v in zip(Q, V)])
            vals.append((tau / self.tau_scale).ravel())
        if self.use_potential:
            P, J = K.tool_points(Q, self.model.fixed, self.hand_tool, self.grasp_point)
            h, dh = _potential_rows(self.spec.field, P, J)
            z_th = self.spec.field.z_th
            vals.append(h / z_th)
            if derivs:
                jac.append((dh / z_th).ravel())
        if self.use_lift:
            val, dq, dqd = _lift_row(self.model, X[-1, :n].copy(), X[-1, n:].copy())
            vals.append(np.array([val]))
            if derivs:
                jac.append(np.concatenate([dq, dqd]))
        g = np.concatenate(vals) if vals else np.zeros(0)
        return g, jac

    def derivs(self, xi):
        dT, X, V = self.split(xi)
        n, nx, N = self.nq, self.nx, self.N
        grad = np.zeros(self.n)
        grad[0] = 1.0 + float(np.sum(V * V)) / N
        grad[1 + (N + 1) * nx:] = 2.0 * dT / N * V.ravel()
        m = N * nx
        h2 = 0.5 * dT / N
        F = np.hstack([X[:, n:], V])
        vals = np.concatenate([-np.ones(m), np.ones(m), np.full(m, -h2), np.full(m, -h2),
                               (-(F[1:] + F[:-1]) / (2 * N)).ravel()])
        Jc = sp.csr_matrix((vals, (self._dyn_rows, self._dyn_cols)), shape=self._dyn_shape)
        _, jac = self._ineq(X, V, derivs=True)
        rows, cols = [], []
        if self.use_torque:
            rows.append(self._tau_rows)
            cols.append(self._tau_cols)
        if self.use_potential:
            rows.append(self._pot_rows)
            cols.append(self._pot_cols)
        if self.use_lift:
            rows.append(np.full(nx, self._lift_row_index))
            cols.append(self._lift_cols)
        if rows:
            Jg = sp.csr_matrix((np.concatenate(jac), (np.concatenate(rows), np.concatenate(cols))),
                               shape=(self.m_g, self.n))
        else:
            Jg = sp.csr_matrix((0, self.n))
        return grad, Jc, Jg

    def hessian_convex(self, xi, y, z):
        return self.hessian(xi, y, z, convex=True)

    def hessian(self, xi, y, z, convex=False):
        """Objective plus collocation curvature; the curvature of torque,
        potential and lift rows is left out.  With ``convex`` set the
        indefinite ΔT coupling is replaced by a positive ΔT diagonal."""
        dT, X, V = self.split(xi)
        n, nx, N = self.nq, self.nx, self.N
        ivs = 1 + (N + 1) * nx + np.arange((N + 1) * n)
        rows = [ivs]
        cols = [ivs]
        vals = [np.full(ivs.size, 2.0 * dT / N)]
        if convex:
            rows.append(np.array([0]))
            cols.append(np.array([0]))
            vals.append(np.array([self.dT_curvature]))
            return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                 shape=(self.n, self.n))
        # dT coupling
        coup = np.zeros((N + 1, nx + n))
        coup[:, nx:] = 2.0 * V / N
        if y.size:
            lam = y.reshape(N, nx)
            s = np.zeros((N + 1, nx))
            s[:-1] += lam
            s[1:] += lam
            # q rows pair with qdot, qdot rows pair with v
            coup[:, n:nx] += -s[:, :n] / (2 * N)
            coup[:, nx:] += -s[:, n:] / (2 * N)
        idx_qd = (1 + np.arange(N + 1)[:, None] * nx + n + np.arange(n)).ravel()
        idx_v = (1 + (N + 1) * nx + np.arange(N + 1)[:, None] * n + np.arange(n)).ravel()
        cidx = np.concatenate([idx_qd, idx_v])
        cval = np.concatenate([coup[:, n:nx].ravel(), coup[:, nx:].ravel()])
        rows += [np.zeros_like(cidx), cidx]
        cols += [cidx, np.zeros_like(cidx)]
        vals += [cval, cval]
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(self.n, self.n))


def transcribe(spec, model, limits, env=None):
    return CollocationNLP(spec, model, limits, env)


def initial_guess(spec, limits):
    """Linear interpolation of q, finite-difference qdot, v = 0, velocity-limit ΔT."""
    n = spec.x_start.size // 2
    N = spec.N
    q0, q1 = spec.x_start[:n], spec.x_target[:n]
    qd_max = np.asarray(limits.qdot_max, float)
    dT = float(np.max(np.abs(q1 - q0) / qd_max))
    dT = float(np.clip(dT, *spec.dT_bounds))
    s = np.linspace(0.0, 1.0, N + 1)[:, None]
    Q = q0 + s * (q1 - q0)
    QD = np.gradient(Q, dT / N, axis=0) if N > 1 else np.tile((q1 - q0) / dT, (N + 1, 1))
    QD = np.clip(QD, -qd_max, qd_max)
    X = np.hstack([Q, QD])
    X[0] = spec.x_start
    if spec.terminal_velocity_free:
        X[-1, :n] = spec.x_target[:n]
    else:
        X[-1] = spec.x_target
    return TrajectoryGrid(dT, X, np.zeros((N + 1, n)))


@dataclass
class PhaseResult:
    grid: TrajectoryGrid
    objective: float
    iterations: int
    residuals: dict
    wall_ms: float


def solve_phase(nlp, guess=None, tol=1e-6, max_iter=100, limits=None):
    if guess is None:
        if limits is None:
            raise ValueError("need limits to build the default guess")
        guess = initial_guess(nlp.spec, limits)
    if guess.N != nlp.N or guess.ndof != nlp.nq:
        raise ValueError("guess does not match the transcription")
    res = sqp.solve(nlp, guess.vector(), tol=tol, max_iter=max_iter)
    grid = TrajectoryGrid.from_vector(res.x, nlp.N, nlp.nq)
    return PhaseResult(grid, res.f, res.iterations, res.residuals, res.wall_ms)


# --------------------------------------------------------------------------
# grasp geometry and the three-phase pipeline

@dataclass(frozen=True)
class GraspConfig:
    tilt: float = np.deg2rad(30.0)          # approach inclination from vertical
    pregrasp_offset: float = 0.05           # back-off along the approach axis, m
    open_state: GraspState = PREGRASP
    closed_state: GraspState = GraspState(0.040, 0.0, 0.0, 0.165)
    grasp_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))  # grasp point in object frame
    gripper_qdot_max: float = np.deg2rad(100.0)
    gripper_qddot_max: np.ndarray = field(
        default_factory=lambda: np.deg2rad(1000.0 * np.array([0.4, 1.5, 0.4, 1.5])))

    @property
    def q_open(self):
        return sdh2_inverse(self.open_state)

    @property
    def q_closed(self):
        return sdh2_inverse(self.closed_state)

    def min_close_time(self):
        """Shortest minimum-jerk closing time honouring the gripper caps."""
        dq = np.abs(self.q_closed - self.q_open)
        t_v = 1.875 * dq / self.gripper_qdot_max
        t_a = np.sqrt(5.7735 * dq / self.gripper_qddot_max)
        return float(np.max(np.concatenate([t_v, t_a])))


def grasp_point_world(object_pose, cfg):
    return object_pose.rotation @ cfg.grasp_offset + object_pose.translation


def grasp_frames(object_pose, cfg, flip=False):
    """Hand rotation, grasp point and the potential frame for an object pose.

    The object is symmetric under a half turn about its vertical axis, so
    ``flip`` selects the equivalent hand roll rotated by π."""
    G = grasp_point_world(object_pose, cfg)
    az = float(np.arctan2(G[1], G[0]))
    yaw = float(np.arctan2(object_pose.rotation[1, 0], object_pose.rotation[0, 0]))
    rel = (yaw - az + np.pi / 2) % np.pi - np.pi / 2
    if flip:
        rel -= np.copysign(np.pi, rel)
    R = rot3("z", az) @ rot3("y", -cfg.tilt) @ rot3("x", np.pi) @ rot3("z", rel)
    frame = Pose(rot3("z", az), G)
    return R, G, frame


def grasp_configurations(model, object_pose, cfg, seed, limits=None):
    """IK solutions (q_pregrasp, q_grasp) for the hand; raises UnreachableError.

    The grasp pose is solved first, then the pre-grasp from that solution, for
    both hand rolls and a second seed with the wrist centred."""
    Gh = sdh2_forward(cfg.q_open)
    seed = np.asarray(seed, float)
    centred = seed.copy()
    centred[4:] = 0.0
    centred[5] = np.pi / 2
    err = None
    for flip in (False, True):
        R, G, _ = grasp_frames(object_pose, cfg, flip)
        pre = Pose(R, G - cfg.pregrasp_offset * R[:, 2])
        for s0 in (seed, centred):
            try:
                q_grasp = inverse_kinematics(model, Pose(R, G), "hand", seed=s0, limits=limits, point=Gh)
                q_pre = inverse_kinematics(model, pre, "hand", seed=q_grasp, limits=limits, point=Gh)
            except UnreachableError as e:
                err = e
                continue
            return q_pre, q_grasp
    raise err


def track_grasp(model, object_pose, cfg, q_pre, q_grasp, limits=None):
    """Grasp and pre-grasp configurations for a moved object, seeded from the
    previous solutions and keeping the hand roll branch closest to them."""
    Gh = sdh2_forward(cfg.q_open)
    R_prev = forward_kinematics(model, q_grasp, "hand").rotation
    cands = [grasp_frames(object_pose, cfg, flip) for flip in (False, True)]
    R, G, _ = min(cands, key=lambda c: rotation_angle(R_prev.T @ c[0]))
    qg = inverse_kinematics(model, Pose(R, G), "hand", seed=q_grasp, limits=limits, point=Gh)
    qp = inverse_kinematics(model, Pose(R, G - cfg.pregrasp_offset * R[:, 2]), "hand",
                            seed=q_pre, limits=limits, point=Gh)
    return qp, qg


@dataclass
class ThreePhasePlan:
    grids: list
    results: list
    q_pregrasp: np.ndarray
    q_grasp: np.ndarray
    field: PotentialField
    wall_ms: list

    @property
    def durations(self):
        return [g.dT for g in self.grids]


def phase_specs(scenario, object_pose, q_pre, q_grasp, x2_start=None, x3_start=None):
    """Phase specifications; later phases need the realised terminal states."""
    n = NDOF
    cfg = scenario.grasp
    _, _, frame = grasp_frames(object_pose, cfg)
    fld = PotentialField(scenario.z_th, np.zeros(2), scenario.Sigma, frame)
    zeros = np.zeros(n)
    x_S = np.concatenate([scenario.q_S, zeros])
    specs = [PhaseSpec(1, x_S, np.concatenate([q_pre, zeros]), scenario.N[0], field=fld,
                       gripper=cfg.q_open)]
    if x2_start is not None:
        lo = max(DT_BOUNDS[0], cfg.min_close_time())
        specs.append(PhaseSpec(2, x2_start, np.concatenate([q_grasp, zeros]), scenario.N[1],
                               lift=True, terminal_velocity_free=True, dT_bounds=(lo, DT_BOUNDS[1])))
    if x3_start is not None:
        specs.append(PhaseSpec(3, x3_start, np.concatenate([scenario.q_T, zeros]), scenario.N[2]))
    return specs, fld


def plan_three_phases(scenario, object_pose, tol=1e-6, max_iter=100):
    model, limits = scenario.model, scenario.limits
    env = scenario.envelope()
    q_pre, q_grasp = grasp_configurations(model, object_pose, scenario.grasp, scenario.q_S, limits)
    grids, results, walls = [], [], []
    x_next = None
    fld = None
    for phase in (1, 2, 3):
        kw = {}
        if phase == 2:
            kw["x2_start"] = x_next
        if phase == 3:
            kw["x2_start"] = grids[0].X[-1]
            kw["x3_start"] = x_next
        specs, fld = phase_specs(scenario, object_pose, q_pre, q_grasp, **kw)
        spec = specs[phase - 1]
        t0 = time.perf_counter()
        nlp = transcribe(spec, model, limits, env)
        res = solve_phase(nlp, tol=tol, max_iter=max_iter, limits=limits)
        walls.append(1e3 * (time.perf_counter() - t0))
        grids.append(res.grid)
        results.append(res)
        x_next = res.grid.X[-1].copy()
    return ThreePhasePlan(grids, results, q_pre, q_grasp, fld, walls)
