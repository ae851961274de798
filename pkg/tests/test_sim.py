import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graspplan import _kernels as K
from graspplan.dynamics import gravity_torque
from graspplan.model import JointState
from graspplan.scenario import Relocation
from graspplan.sim import (GripperGains, Timeline, TrackingGains, VelocityFilter, closed_loop_step,
                           computed_torque, gripper_command, gripper_step, minimum_jerk,
                           relocation_times, run_scenario, velocity_filter)

GAINS = TrackingGains()          # K1 = 100, K2 = 20: critically damped at ω = 10 rad/s


def test_computed_torque_identities(model, rng):
    q = rng.uniform(-1, 1, 7)
    tau = computed_torque(model, GAINS, JointState(q, np.zeros(7)), (q, np.zeros(7), np.zeros(7)))
    assert np.allclose(tau, gravity_torque(model, q), atol=1e-10)
    qd, qr, qdr, vr = rng.normal(size=7), rng.uniform(-1, 1, 7), rng.normal(size=7), rng.normal(size=7)
    tau = computed_torque(model, GAINS, JointState(q, qd), (qr, qdr, vr))
    qdd = K.forward_dynamics(q, qd, tau, *model.dyn_args)
    assert np.allclose(qdd, vr - GAINS.K2 @ (qd - qdr) - GAINS.K1 @ (q - qr), atol=1e-9)


@pytest.mark.parametrize("moving", [False, True])
def test_error_follows_linear_ode(model, moving):
    q0 = np.array([0.2, 0.5, -0.1, -1.0, 0.3, 0.6, 0.1])
    q1 = q0 + 0.3
    T = 1.0

    def ref(t):
        if not moving:
            return q0, np.zeros(7), np.zeros(7)
        q, qd = minimum_jerk(q0, q1, T, t)
        s = min(max(t / T, 0.0), 1.0)
        return q, qd, (q1 - q0) * (60 * s - 180 * s ** 2 + 120 * s ** 3) / T ** 2

    e0 = 0.05 * np.cos(np.arange(7))
    state = JointState(q0 + e0, np.zeros(7))
    dt, t, worst = 1e-3, 0.0, 0.0
    for _ in range(1000):
        state = closed_loop_step(model, GAINS, state, ref, t, dt)
        t += dt
        e = state.q - ref(t)[0]
        worst = max(worst, np.abs(e - e0 * (1 + 10 * t) * np.exp(-10 * t)).max())
    assert worst < 1e-6
    assert np.abs(state.q - ref(t)[0]).max() < 1e-3 * 0.05 * 10   # decayed below (1+10)e^-10 e0


def test_gripper_command_and_integrator():
    g = GripperGains()
    qd_ref = np.array([0.1, -0.2, 0.0, 0.3])
    cmd, integ = gripper_command(g, np.ones(4), (np.ones(4), qd_ref), 1e-3)
    assert np.array_equal(cmd, qd_ref) and not np.any(integ)
    # a constant error: the command rises by K_I e dt every tick until the cap
    e = np.full(4, 0.2)
    integ, cmds = None, []
    for _ in range(5000):
        cmd, integ = gripper_command(g, np.zeros(4), (e, np.zeros(4)), 1e-2, integ)
        cmds.append(cmd)
    cmds = np.array(cmds)
    d = np.diff(cmds[:50], axis=0)
    assert np.allclose(d, np.diag(g.K_I) * e * 1e-2)
    assert np.allclose(cmds[-1], g.qdot_max)
    assert np.all(cmds <= g.qdot_max)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=40, deadline=None)
def test_gripper_caps_never_exceeded(seed):
    rng = np.random.default_rng(seed)
    g = GripperGains()
    dt = 1e-3
    q, qd, integ = np.zeros(4), np.zeros(4), None
    for _ in range(200):
        target = rng.uniform(-2, 2, 4)
        cmd, integ = gripper_command(g, q, (target, rng.normal(0, 3, 4)), dt, integ)
        assert np.all(np.abs(cmd) <= g.qdot_max)
        q_new, qd_new = gripper_step(g, q, qd, cmd, dt)
        assert np.all(np.abs(qd_new - qd) <= g.qddot_max * dt * (1 + 1e-12))
        assert np.all(np.abs(qd_new) <= g.qdot_max * (1 + 1e-12))
        q, qd = q_new, qd_new


def test_gain_validation():
    with pytest.raises(ValueError):
        TrackingGains(K1=-np.eye(7))
    with pytest.raises(ValueError):
        TrackingGains(K2=np.ones((7, 7)))
    with pytest.raises(ValueError):
        GripperGains(qddot_max=0.0)
    with pytest.raises(ValueError):
        VelocityFilter(0.0, 1e-3, np.zeros(1))


T_F, DT = 0.012, 1e-3


def test_filter_constant_input():
    out = velocity_filter(np.full((200, 3), 0.7), T_F, DT, qd0=np.ones(3))
    assert np.abs(out[-1]).max() < 1e-6
    assert np.allclose(out[0], 1.0)


def test_filter_ramp_settles():
    t = np.arange(0, 0.2, DT)
    out = velocity_filter(2.0 * t[:, None], T_F, DT)[:, 0]
    k = int(round(3 * T_F / DT))
    assert out[k] >= 0.95 * 2.0 * (1 - 0.01)
    assert out[-1] == pytest.approx(2.0, rel=1e-6)


def test_filter_corner_attenuation():
    w = 1.0 / T_F
    t = np.arange(0, 2.0, DT)
    out = velocity_filter(np.sin(w * t)[:, None], T_F, DT)[:, 0]
    amp = np.abs(out[t > 1.0]).max() / w
    assert 20 * np.log10(amp) == pytest.approx(-3.01, abs=0.2)


def test_timeline(nominal_plan):
    grids = nominal_plan.grids
    tl = Timeline(grids)
    assert tl.end == pytest.approx(sum(g.dT for g in grids))
    t1 = grids[0].dT
    assert tl.locate(0.5 * t1)[0] == 0 and tl.locate(t1 + 1e-9)[0] == 1
    q_a = tl.reference(t1 - 1e-9)[0]
    q_b = tl.reference(t1 + 1e-9)[0]
    assert np.abs(q_a - q_b).max() < 1e-6
    q, qd, v, i = tl.reference(tl.end + 1.0)
    assert i == 3 and np.allclose(q, grids[2].Q[-1]) and not np.any(qd)
    # swapping in a longer active grid keeps the normalized phase time
    g0 = grids[0]
    longer = type(g0)(1.1 * g0.dT, g0.X, g0.V)
    t = 0.4 * g0.dT
    tl.replace(t, {0: longer})
    assert tl.locate(t)[1] == pytest.approx(0.4 * longer.dT)
    assert tl.starts[1] == pytest.approx(tl.starts[0] + longer.dT)


def test_relocation_times():
    shift = np.array([0.01, 0.0, 0.0])
    motion = [Relocation(shift, t=0.25), Relocation(shift, phase=1, fraction=0.75),
              Relocation(shift, phase=3, fraction=0.5)]
    assert relocation_times(motion, [1.0, 2.0, 3.0]) == pytest.approx([0.25, 0.75, 4.5])


def test_noiseless_static_run(scenario, nominal_plan):
    rep = run_scenario(scenario, seed=0, plan=nominal_plan, noise=(0.0, 0.0), deterministic=True)
    assert rep.success, rep.reason
    assert rep.terminal_error < 5e-4
    assert not rep.violations
    kinds = {e["kind"] for e in rep.events}
    assert {"phase", "grasp", "outcome"} <= kinds
