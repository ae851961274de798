"""Closed-loop simulation of the three-phase grasp.

Computed-torque tracking of the planned joint trajectory, a PI gripper in
velocity mode, RK4 plant integration, the wrist-camera EKF and the 10 Hz
deviation replanner, all on one virtual clock.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from . import ekf, replanner
from .dynamics import inverse_dynamics, step_plant
from .errors import (DeadlineError, GraspPlanError, IntegrationError, NonConvergenceError,
                     ReplanInfeasibleError, UnreachableError)
from .model import GRIPPER_Q_MAX, JointState, Pose, forward_kinematics, rot3, sdh2_forward
from .planner import grasp_point_world, plan_three_phases, track_grasp

__all__ = ["TrackingGains", "GripperGains", "computed_torque", "gripper_command", "gripper_step",
           "VelocityFilter", "velocity_filter", "step_plant", "minimum_jerk", "SimReport",
           "run_scenario", "replan_cycle", "Timeline", "sample_object_pose", "run_trial"]

OUTCOMES = ("success", "missed", "limit-violation")


def _diag(name, K, n, strict):
    K = np.asarray(K, float)
    if K.ndim == 0:
        K = K * np.eye(n)
    elif K.ndim == 1:
        K = np.diag(K)
    if K.shape != (n, n) or np.any(K != np.diag(np.diag(K))):
        raise ValueError(f"{name} must be a {n}x{n} diagonal matrix")
    d = np.diag(K)
    if np.any(d <= 0) if strict else np.any(d < 0):
        raise ValueError(f"{name} diagonal must be {'positive' if strict else 'nonnegative'}")
    return K


# --------------------------------------------------------------------------
# arm tracking

@dataclass(frozen=True)
class TrackingGains:
    K1: np.ndarray = field(default_factory=lambda: 100.0 * np.eye(7))
    K2: np.ndarray = field(default_factory=lambda: 20.0 * np.eye(7))

    def __post_init__(self):
        object.__setattr__(self, "K1", _diag("K1", self.K1, 7, True))
        object.__setattr__(self, "K2", _diag("K2", self.K2, 7, True))


def computed_torque(model, gains, state, ref):
    """τ = C q̇ + g + M (v* − K2 ė − K1 e) with e = q − q*."""
    q_ref, qd_ref, v_ref = ref
    e = state.q - q_ref
    ed = state.qdot - qd_ref
    a = v_ref - gains.K2 @ ed - gains.K1 @ e
    return inverse_dynamics(model, state.q, state.qdot, a)


def closed_loop_step(model, gains, state, ref_fn, t, dt):
    """RK4 step of the arm under the control law evaluated at every stage
    (continuous-time computed torque); ``ref_fn(t)`` returns (q*, q̇*, v*)."""
    args = model.dyn_args

    def f(q, qd, ts):
        tau = computed_torque(model, gains, JointState(q, qd), ref_fn(ts))
        return qd, K.forward_dynamics(q, qd, tau, *args)

    q, qd = state.q, state.qdot
    k1 = f(q, qd, t)
    k2 = f(q + 0.5 * dt * k1[0], qd + 0.5 * dt * k1[1], t + 0.5 * dt)
    k3 = f(q + 0.5 * dt * k2[0], qd + 0.5 * dt * k2[1], t + 0.5 * dt)
    k4 = f(q + dt * k3[0], qd + dt * k3[1], t + dt)
    return JointState(q + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
                      qd + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]))


# --------------------------------------------------------------------------
# gripper

@dataclass(frozen=True)
class GripperGains:
    K_P: np.ndarray = field(default_factory=lambda: 5.0 * np.eye(4))
    K_I: np.ndarray = field(default_factory=lambda: 1.0 * np.eye(4))
    qdot_max: np.ndarray = field(default_factory=lambda: np.full(4, np.deg2rad(100.0)))
    qddot_max: np.ndarray = field(
        default_factory=lambda: np.deg2rad(1000.0 * np.array([0.4, 1.5, 0.4, 1.5])))

    def __post_init__(self):
        object.__setattr__(self, "K_P", _diag("K_P", self.K_P, 4, False))
        object.__setattr__(self, "K_I", _diag("K_I", self.K_I, 4, False))
        for name in ("qdot_max", "qddot_max"):
            v = np.broadcast_to(np.asarray(getattr(self, name), float), (4,)).copy()
            if np.any(v <= 0):
                raise ValueError(f"{name} caps must be positive")
            object.__setattr__(self, name, v)


def gripper_command(gains, q_h, ref, dt, integral=None):
    """Velocity-mode command q̇* + K_P e + K_I ∫e, clamped to the velocity caps.

    Returns (command, updated integral)."""
    q_ref, qd_ref = ref
    e = np.asarray(q_ref, float) - np.asarray(q_h, float)
    integral = (np.zeros(4) if integral is None else np.asarray(integral, float)) + e * dt
    if not np.all(np.isfinite(integral)):
        raise ValueError("gripper integrator diverged")
    cmd = qd_ref + gains.K_P @ e + gains.K_I @ integral
    return np.clip(cmd, -gains.qdot_max, gains.qdot_max), integral


def gripper_step(gains, q_h, qd_h, cmd, dt):
    """Speed-mode joint: velocity follows the command under the acceleration caps."""
    dv = np.clip(cmd - qd_h, -gains.qddot_max * dt, gains.qddot_max * dt)
    qd_new = qd_h + dv
    return q_h + qd_new * dt, qd_new


def minimum_jerk(q0, q1, T, tau):
    """(q, q̇) along the quintic rest-to-rest profile at time tau in [0, T]."""
    s = min(max(tau / T, 0.0), 1.0)
    d = np.asarray(q1, float) - np.asarray(q0, float)
    return (q0 + d * (10 * s ** 3 - 15 * s ** 4 + 6 * s ** 5),
            d * (30 * s ** 2 - 60 * s ** 3 + 30 * s ** 4) / T)


# --------------------------------------------------------------------------
# differentiating filter

class VelocityFilter:
    """Discrete s/(T s + 1) acting on positions (bilinear discretization,
    exact on ramps)."""

    def __init__(self, time_constant, dt, q0, qd0=None):
        if not time_constant > 0:
            raise ValueError("time constant must be positive")
        self.T = float(time_constant)
        self.c = (2 * self.T - dt) / (2 * self.T + dt)
        self.g = 2.0 / (2 * self.T + dt)
        q0 = np.asarray(q0, float)
        qd0 = np.zeros_like(q0) if qd0 is None else np.asarray(qd0, float)
        # history chosen so the first output equals qd0
        self.y = qd0.copy()
        self.q_prev = q0 - dt * qd0

    def __call__(self, q):
        self.y = self.c * self.y + self.g * (q - self.q_prev)
        self.q_prev = np.array(q, float)
        return self.y.copy()


def velocity_filter(q_samples, time_constant, dt, qd0=None):
    """Filtered derivative of a sampled position sequence (rows are samples)."""
    Q = np.atleast_2d(np.asarray(q_samples, float))
    f = VelocityFilter(time_constant, dt, Q[0], qd0)
    return np.array([f(q) for q in Q])


# --------------------------------------------------------------------------
# timeline

class Timeline:
    """Phase grids with absolute start times.

    Replacing the active grid keeps the normalized phase time, so the
    reference stays continuous; later phases follow back to back."""

    def __init__(self, grids, t0=0.0):
        self.grids = list(grids)
        self.starts = list(np.concatenate([[t0], t0 + np.cumsum([g.dT for g in self.grids[:-1]])]))

    @property
    def end(self):
        return self.starts[-1] + self.grids[-1].dT

    def locate(self, t):
        """(phase index 0..2, phase time); 3 after the last phase."""
        for i in range(len(self.grids)):
            if t < self.starts[i] + self.grids[i].dT:
                return i, t - self.starts[i]
        return len(self.grids), t - self.starts[-1]

    def reference(self, t):
        i, tau = self.locate(t)
        if i >= len(self.grids):
            g = self.grids[-1]
            n = g.ndof
            return g.Q[-1].copy(), np.zeros(n), np.zeros(n), i
        q, qd, v = self.grids[i].sample(tau)
        return q, qd, v, i

    def replace(self, t, new_grids):
        """Swap grids; dict phase index -> grid.  Phases are re-anchored at t."""
        i, tau = self.locate(t)
        for j, g in new_grids.items():
            if j == i:
                sigma = tau / self.grids[i].dT
                self.starts[i] = t - sigma * g.dT
            self.grids[j] = g
        for j in range(max(i, 0) + 1, len(self.grids)):
            self.starts[j] = self.starts[j - 1] + self.grids[j - 1].dT


# --------------------------------------------------------------------------
# replanning

@dataclass
class ReplanRecord:
    t_event: float
    phase: int
    solve_ms: float
    objective: float
    clamp_flag: bool
    deadline_miss: bool
    status: str = "ok"


def replan_cycle(scenario, timeline, t, estimate, targets, deadline_ms=None):
    """One replanning cycle against the estimated object pose.

    ``targets`` holds the current (q_pre, q_grasp).  All phases from the
    active one on are updated; returns (new grids dict, new targets, record)
    or raises DeadlineError / ReplanInfeasibleError / UnreachableError."""
    t0 = time.perf_counter()
    model, limits, n = scenario.model, scenario.limits, 7
    i, tau = timeline.locate(t)
    q_pre, q_grasp = track_grasp(model, estimate, scenario.grasp, targets[0], targets[1], limits)
    grids = timeline.grids
    # boundary pins move by the change of the targets, so an unchanged
    # estimate gives an exactly zero deviation problem
    zn = np.zeros(n)
    moves = [np.concatenate([q_pre - targets[0], zn]), np.concatenate([q_grasp - targets[1], zn]),
             np.zeros(2 * n)]
    new = {}
    objective = 0.0
    clamp = False
    carry = np.zeros(2 * n)      # displacement of the previous phase's end
    for j in range(i, 3):
        g = grids[j]
        if j == i:
            start = int(np.floor(tau / g.dt)) + 1
            if start >= g.N:
                continue
            x_start = g.X[start]
        else:
            start = 0
            x_start = g.X[0] + carry
        if not np.any(moves[j]) and not np.any(carry):
            continue                 # pins unchanged: the zero deviation is optimal
        budget = None
        if deadline_ms is not None:
            budget = deadline_ms - 1e3 * (time.perf_counter() - t0)
            if budget <= 0:
                raise DeadlineError("replan cycle exceeded its budget",
                                    elapsed_ms=1e3 * (time.perf_counter() - t0))
        prob = replanner.assemble(g, x_start, g.X[-1] + moves[j], scenario.weights, limits,
                                  scenario.dT_bounds, start=start, v_bound=scenario.v_bound)
        dev, _ = replanner.solve(prob, deadline=budget)
        g_new = replanner.apply_update(g, dev)
        carry = g_new.X[-1] - g.X[-1]
        new[j] = g_new
        objective += dev.objective
        clamp |= prob.clamp_flag
    elapsed = 1e3 * (time.perf_counter() - t0)
    if deadline_ms is not None and elapsed > deadline_ms:
        raise DeadlineError("replan cycle exceeded its budget", elapsed_ms=elapsed)
    return new, (q_pre, q_grasp), ReplanRecord(t, i + 1, elapsed, objective, clamp, False)


# --------------------------------------------------------------------------
# report

@dataclass
class SimReport:
    t: np.ndarray
    q: np.ndarray
    qdot: np.ndarray
    tau: np.ndarray
    ref_q: np.ndarray
    err_norm: np.ndarray
    phase: np.ndarray
    ekf_log: np.ndarray             # t, z[7], trace_P, innovation_norm, meas_available
    events: list
    replans: list
    outcome: str
    terminal_error: float
    violations: list
    durations: list
    wall_ms: dict
    seed: int = 0
    reason: str = ""

    @property
    def success(self):
        return self.outcome == "success"


def _failed(reason, seed, wall_ms):
    z = np.zeros((0, 7))
    return SimReport(np.zeros(0), z, z, z, z, np.zeros(0), np.zeros(0, int), np.zeros((0, 11)),
                     [dict(t=0.0, kind="outcome", detail=f"missed: {reason}")], [], "missed",
                     float("nan"), [], [], wall_ms, seed, reason)


def _check_limits(limits, q, qd, tau, tol=1e-9):
    bad = []
    if np.any(np.abs(q) > limits.q_max + tol):
        bad.append("q")
    if np.any(np.abs(qd) > limits.qdot_max + tol):
        bad.append("qdot")
    if np.any(np.abs(tau) > limits.tau_max + tol):
        bad.append("tau")
    return bad


def relocation_times(motion, durations):
    """Absolute firing times of scripted shifts, resolved against the plan."""
    starts = np.concatenate([[0.0], np.cumsum(durations)])
    out = []
    for r in motion:
        if r.t is not None:
            out.append(float(r.t))
        else:
            out.append(float(starts[r.phase - 1] + r.fraction * durations[r.phase - 1]))
    return out


def run_scenario(scenario, seed, replan=None, deterministic=False, plan=None, filter_tc="scenario",
                 noise=None):
    """Simulate one grasp; failures become a 'missed' report instead of raising.

    ``plan`` reuses a precomputed ThreePhasePlan, ``replan`` overrides the
    scenario switch and ``noise`` the camera noise (σ_t, σ_r).  In
    deterministic mode replanning deadlines are off and timing fields are 0."""
    wall = {}
    t_start = time.perf_counter()
    replan = scenario.replan if replan is None else bool(replan)
    noise = (scenario.sigma_t, scenario.sigma_r) if noise is None else tuple(noise)
    tc = scenario.filter_tc if filter_tc == "scenario" else filter_tc
    model, limits = scenario.model, scenario.limits
    cfg = scenario.grasp
    rng = np.random.default_rng(seed)
    try:
        if plan is None:
            t0 = time.perf_counter()
            plan = plan_three_phases(scenario, scenario.object_pose)
            wall["plan"] = 1e3 * (time.perf_counter() - t0)
    except (NonConvergenceError, UnreachableError, GraspPlanError) as e:
        return _failed(f"planning: {e}", seed, {} if deterministic else wall)

    dt = scenario.dt
    timeline = Timeline(plan.grids)
    durations = list(plan.durations)
    targets = (plan.q_pregrasp, plan.q_grasp)
    fire = relocation_times(scenario.motion, durations)
    pending = sorted(zip(fire, range(len(fire))))
    obj = scenario.object_pose
    gains = TrackingGains(scenario.K1 * np.eye(7), scenario.K2 * np.eye(7))
    ggains = GripperGains(scenario.K_P * np.eye(4), scenario.K_I * np.eye(4),
                          cfg.gripper_qdot_max, cfg.gripper_qddot_max)
    ecfg = ekf.EkfConfig(Ta=scenario.Ta)
    n_pred = max(1, int(round(dt / ecfg.Ta)))
    Gh = sdh2_forward(cfg.q_open)

    state = JointState(scenario.q_S.copy(), np.zeros(7))
    cam, _, _ = ekf.camera_motion(model, state.q, state.qdot)
    # static warm-up: the camera looks at the object before the motion starts
    y = ekf.to_output(ekf.synthetic_measurement(obj, cam, noise, rng), cam)
    est = ekf.EkfState.from_measurement(y, ecfg)
    for _ in range(scenario.init_frames - 1):
        y = ekf.to_output(ekf.synthetic_measurement(obj, cam, noise, rng), cam)
        est = ekf.update(est, y, ecfg)

    # the reference passes through the same differentiator, so the damping
    # term sees the filtered derivative of e rather than the filter lag
    vf = VelocityFilter(tc, dt, state.q) if tc else None
    vf_ref = VelocityFilter(tc, dt, state.q) if tc else None
    q_open, q_closed = cfg.q_open, cfg.q_closed
    q_h, qd_h = q_open.copy(), np.zeros(4)
    q_prev = state.q
    integ = np.zeros(4)
    T_end = timeline.end
    steps = int(np.ceil(T_end / dt)) + 1
    cam_every = 1.0 / scenario.camera_rate
    rep_every = scenario.replan_period
    log_t, log_q, log_qd, log_tau, log_ref, log_err, log_ph, log_ekf = ([] for _ in range(8))
    events, replans, violations = [], [], []
    terminal = float("nan")
    phase_prev = 0
    t_loop = time.perf_counter()
    k = 0
    try:
        while True:
            t = k * dt
            while pending and pending[0][0] <= t + 1e-12:
                _, idx = pending.pop(0)
                shift = scenario.motion[idx].shift
                obj = Pose(obj.rotation, obj.translation + shift)
                events.append(dict(t=t, kind="relocation", detail=" ".join(f"{s:.6g}" for s in shift)))
            qd_meas = vf(state.q) if vf is not None else state.qdot
            meas_state = JointState(state.q, qd_meas)
            q_ref, qd_ref, v_ref, ph = timeline.reference(t)
            qd_ref_c = vf_ref(q_ref) if vf_ref is not None else qd_ref
            if ph != phase_prev:
                if ph >= 2 and np.isnan(terminal):
                    H = forward_kinematics(model, state.q, "hand")
                    terminal = float(np.linalg.norm(H.rotation @ Gh + H.translation
                                                    - grasp_point_world(obj, cfg)))
                    events.append(dict(t=t, kind="grasp", detail=f"terminal_error={terminal:.6g}"))
                events.append(dict(t=t, kind="phase", detail=str(ph + 1)))
                phase_prev = ph
            tau = computed_torque(model, gains, meas_state, (q_ref, qd_ref_c, v_ref))

            # gripper: open until phase 2, closing profile over phase 2
            if ph < 1:
                gh_ref, ghd_ref = q_open, np.zeros(4)
            elif ph == 1:
                _, tau2 = timeline.locate(t)
                gh_ref, ghd_ref = minimum_jerk(q_open, q_closed, timeline.grids[1].dT, tau2)
            else:
                gh_ref, ghd_ref = q_closed, np.zeros(4)
            cmd, integ = gripper_command(ggains, q_h, (gh_ref, ghd_ref), dt, integ)

            bad = _check_limits(limits, state.q, state.qdot, tau)
            if np.any(np.abs(q_h) > GRIPPER_Q_MAX + 1e-9):
                bad.append("gripper")
            if bad:
                violations.append((t, ",".join(bad)))

            # camera, EKF and replanning on the measured state
            # the prediction integrates the encoder increment of the last step;
            # the control filter's lag would bias the offset between frames
            qd_enc = (state.q - q_prev) / dt if k > 0 else np.zeros(7)
            q_prev = state.q
            cam, w, p_dot = ekf.camera_motion(model, state.q, qd_enc)
            meas = k > 0 and int(t / cam_every + 1e-9) != int((t - dt) / cam_every + 1e-9)
            if k > 0:
                for _ in range(n_pred):
                    est = ekf.predict(est, (w, p_dot), ecfg)
            if meas:
                y = ekf.to_output(ekf.synthetic_measurement(obj, cam, noise, rng), cam)
                resets = est.resets
                est = ekf.update(est, y, ecfg)
                events.append(dict(t=t, kind="measurement", detail=f"innovation={est.innovation_norm:.6g}"))
                if est.resets > resets:
                    events.append(dict(t=t, kind="ekf-reset", detail=f"stat={est.stat:.6g}"))
            log_ekf.append(np.concatenate([[t], est.z, [np.trace(est.P), est.innovation_norm,
                                                        1.0 if meas else 0.0]]))
            rep_due = k > 0 and int(t / rep_every + 1e-9) != int((t - dt) / rep_every + 1e-9)
            if replan and rep_due and ph <= 1:
                rec = _do_replan(scenario, timeline, t, ekf.world_pose(est, cam), targets,
                                 deterministic)
                if rec[0] is not None:
                    timeline.replace(t, rec[0])
                    targets = rec[1]
                replans.append(rec[2])
                events.append(dict(t=t, kind="replan", detail=rec[2].status))

            log_t.append(t)
            log_q.append(state.q)
            log_qd.append(state.qdot)
            log_tau.append(tau)
            log_ref.append(q_ref)
            log_err.append(float(np.linalg.norm(state.q - q_ref)))
            log_ph.append(ph + 1)
            if ph >= 3:
                break
            state = step_plant(model, state, tau, dt)
            q_h, qd_h = gripper_step(ggains, q_h, qd_h, cmd, dt)
            k += 1
            if k > 4 * steps + 10000:
                raise IntegrationError("timeline did not terminate")
    except (IntegrationError, ValueError) as e:
        return _failed(f"simulation: {e}", seed, {} if deterministic else wall)
    wall["loop"] = 1e3 * (time.perf_counter() - t_loop)
    wall["total"] = 1e3 * (time.perf_counter() - t_start)

    if violations:
        outcome = "limit-violation"
    elif terminal < scenario.success_gate:
        outcome = "success"
    else:
        outcome = "missed"
    events.append(dict(t=log_t[-1], kind="outcome", detail=f"{outcome} terminal_error={terminal:.6g}"))
    if deterministic:
        wall = {k: 0.0 for k in wall}
        for r in replans:
            r.solve_ms = 0.0
    return SimReport(np.array(log_t), np.array(log_q), np.array(log_qd), np.array(log_tau),
                     np.array(log_ref), np.array(log_err), np.array(log_ph), np.array(log_ekf),
                     events, replans, outcome, terminal, violations,
                     [g.dT for g in timeline.grids], wall, seed)


def _do_replan(scenario, timeline, t, estimate, targets, deterministic):
    deadline = None if deterministic else scenario.deadline_ms
    i, _ = timeline.locate(t)
    t0 = time.perf_counter()
    try:
        new, tg, rec = replan_cycle(scenario, timeline, t, estimate, targets, deadline)
        return new, tg, rec
    except DeadlineError as e:
        return None, targets, ReplanRecord(t, i + 1, e.elapsed_ms, 0.0, False, True, "deadline")
    except (ReplanInfeasibleError, UnreachableError) as e:
        ms = 1e3 * (time.perf_counter() - t0)
        return None, targets, ReplanRecord(t, i + 1, ms, 0.0, False, False,
                                           "infeasible" if isinstance(e, ReplanInfeasibleError)
                                           else "unreachable")


# --------------------------------------------------------------------------
# Monte Carlo trials

def sample_object_pose(scenario, rng):
    """Uniform position in the scenario box and uniform yaw in its range."""
    p = rng.uniform(scenario.box_lo, scenario.box_hi)
    yaw = rng.uniform(*scenario.yaw_range)
    return Pose(rot3("z", yaw), p)


@dataclass
class TrialResult:
    index: int
    seed: int
    position: np.ndarray
    yaw: float
    outcome: str
    terminal_error: float
    plan_ms: float
    replan_mean_ms: float
    replan_max_ms: float
    deadline_misses: int
    reason: str = ""


def run_trial(scenario, index, seed, deterministic=False, noise=None):
    """One Monte Carlo trial: sample a pose, plan for it and simulate."""
    # separate stream from the camera noise, which run_scenario seeds with `seed`
    rng = np.random.default_rng([seed, 1])
    pose = sample_object_pose(scenario, rng)
    scn = scenario.with_object(pose)
    t0 = time.perf_counter()
    plan = None
    reason = ""
    try:
        plan = plan_three_phases(scn, pose)
    except GraspPlanError as e:
        reason = f"planning: {e}"
    plan_ms = 0.0 if deterministic else 1e3 * (time.perf_counter() - t0)
    yaw = float(np.arctan2(pose.rotation[1, 0], pose.rotation[0, 0]))
    if plan is None:
        return TrialResult(index, seed, pose.translation, yaw, "missed", float("nan"), plan_ms,
                           0.0, 0.0, 0, reason)
    rep = run_scenario(scn, seed, deterministic=deterministic, plan=plan, noise=noise)
    ms = [r.solve_ms for r in rep.replans] or [0.0]
    return TrialResult(index, seed, pose.translation, yaw, rep.outcome, rep.terminal_error, plan_ms,
                       float(np.mean(ms)), float(np.max(ms)),
                       sum(r.deadline_miss for r in rep.replans), rep.reason)
