import numpy as np
import pytest

from graspplan import sqp
from graspplan.dynamics import CoriolisEnvelope
from graspplan.errors import NonConvergenceError, SpecError
from graspplan.model import Pose, forward_kinematics, rot3, sdh2_forward
from graspplan.planner import (PhaseSpec, PotentialField, TrajectoryGrid, grasp_configurations,
                               grasp_point_world, initial_guess, lift_velocity, phase_specs,
                               potential_clearance, solve_phase, track_grasp, transcribe)
from graspplan.model import JointState


def _nlps(scenario, plan):
    g1, g2, _ = plan.grids
    specs, _ = phase_specs(scenario, scenario.object_pose, plan.q_pregrasp, plan.q_grasp,
                           x2_start=g1.X[-1], x3_start=g2.X[-1])
    env = scenario.envelope()
    return [transcribe(s, scenario.model, scenario.limits, env) for s in specs]


def test_collocation_residual(nominal_plan):
    for g in nominal_plan.grids:
        assert g.N == 100
        assert np.abs(g.collocation_residual()).max() < 1e-6


def test_constraints_hold(scenario, nominal_plan):
    for nlp, g in zip(_nlps(scenario, nominal_plan), nominal_plan.grids):
        xi = g.vector()
        _, c, gv = nlp.values(xi)
        assert np.abs(c).max() < 1e-6
        assert np.all(gv >= nlp.g_lo - 1e-6) and np.all(gv <= nlp.g_hi + 1e-6)
        assert np.all(xi >= nlp.lb - 1e-6) and np.all(xi <= nlp.ub + 1e-6)


def test_boundary_states_shared(scenario, nominal_plan):
    g1, g2, g3 = nominal_plan.grids
    # the next phase is pinned to the previous end state through its bounds
    assert np.abs(g1.X[-1] - g2.X[0]).max() < 1e-9 and np.abs(g2.X[-1] - g3.X[0]).max() < 1e-9
    assert np.allclose(g1.X[0], np.concatenate([scenario.q_S, np.zeros(7)]))
    assert np.allclose(g3.X[-1], np.concatenate([scenario.q_T, np.zeros(7)]), atol=1e-9)
    assert np.allclose(g2.Q[-1], nominal_plan.q_grasp, atol=1e-9)


def test_potential_and_lift(scenario, nominal_plan):
    fld = nominal_plan.field
    for q in nominal_plan.grids[0].Q:
        assert potential_clearance(fld, scenario.model, scenario.grasp.q_open, q) > -1e-6
    x = nominal_plan.grids[1].X[-1]
    assert lift_velocity(scenario.model, JointState(x[:7], x[7:])) >= -1e-6


def test_grasp_configurations_reach_the_object(scenario, nominal_plan):
    Gh = sdh2_forward(scenario.grasp.q_open)
    H = forward_kinematics(scenario.model, nominal_plan.q_grasp, "hand")
    G = grasp_point_world(scenario.object_pose, scenario.grasp)
    assert np.linalg.norm(H @ Gh - G) < 1e-6
    Hp = forward_kinematics(scenario.model, nominal_plan.q_pregrasp, "hand")
    assert np.linalg.norm(Hp @ Gh - G) == pytest.approx(scenario.grasp.pregrasp_offset, abs=1e-6)


def test_track_grasp_follows_a_shift(scenario, nominal_plan):
    pose = scenario.object_pose
    moved = Pose(pose.rotation, pose.translation + np.array([0.01, -0.005, 0.0]))
    qp, qg = track_grasp(scenario.model, moved, scenario.grasp, nominal_plan.q_pregrasp,
                         nominal_plan.q_grasp, scenario.limits)
    Gh = sdh2_forward(scenario.grasp.q_open)
    H = forward_kinematics(scenario.model, qg, "hand")
    assert np.linalg.norm(H @ Gh - grasp_point_world(moved, scenario.grasp)) < 1e-6
    assert np.abs(qg - nominal_plan.q_grasp).max() < 0.1


def test_yaw_symmetry_branch(scenario):
    pose = Pose(rot3("z", 1.2), np.array([0.7, -0.1, 0.1]))
    qp, qg = grasp_configurations(scenario.model, pose, scenario.grasp, scenario.q_S, scenario.limits)
    assert np.all(np.abs(qg) <= scenario.limits.q_max)


def _small_spec():
    n = 7
    xs = np.zeros(14)
    xt = np.concatenate([0.3 * np.ones(n), np.zeros(n)])
    return PhaseSpec(3, xs, xt, N=10)


def test_small_phase_without_dynamics(model):
    spec = _small_spec()
    nlp = transcribe(spec, model, model.limits, CoriolisEnvelope.zero())
    res = solve_phase(nlp, limits=model.limits)
    assert max(res.residuals.values()) < 1e-6
    assert np.abs(res.grid.collocation_residual()).max() < 1e-6
    # rest-to-rest: a shorter horizon needs more input effort, so the optimum trades both
    assert res.grid.dT > 0.1


def test_sample_interpolates_nodes(nominal_plan):
    g = nominal_plan.grids[0]
    for k in (0, 17, 50, 99):
        q, qd, v = g.sample(k * g.dt)
        assert np.allclose(q, g.Q[k], atol=1e-12) and np.allclose(v, g.V[k], atol=1e-12)
    q, qd, v = g.sample(g.dT)
    assert np.allclose(q, g.Q[-1], atol=1e-12)
    # the state interpolant integrates the linear interpolant of the node rates
    k, frac, h = 37, 0.3, 1e-6
    t = (k + frac) * g.dt
    dq = (g.sample(t + h)[0] - g.sample(t - h)[0]) / (2 * h)
    assert np.allclose(dq, (1 - frac) * g.QD[k] + frac * g.QD[k + 1], atol=1e-7)


def test_grid_round_trip(nominal_plan):
    g = nominal_plan.grids[1]
    back = TrajectoryGrid.from_vector(g.vector(), g.N)
    assert back.dT == g.dT and np.array_equal(back.X, g.X) and np.array_equal(back.V, g.V)


def test_initial_guess_is_consistent(model):
    spec = _small_spec()
    guess = initial_guess(spec, model.limits)
    assert np.array_equal(guess.X[0], spec.x_start) and np.array_equal(guess.X[-1], spec.x_target)


def test_spec_validation():
    xs = np.zeros(14)
    with pytest.raises(SpecError):
        PhaseSpec(4, xs, xs)
    with pytest.raises(SpecError):
        PhaseSpec(1, xs, xs)                       # phase 1 needs a field
    with pytest.raises(SpecError):
        PhaseSpec(2, xs, xs)                       # phase 2 needs the lift condition
    with pytest.raises(SpecError):
        PhaseSpec(3, xs, np.ones(14))              # moving target in phase 3
    with pytest.raises(SpecError):
        PhaseSpec(3, xs, xs, dT_bounds=(0.0, 1.0))
    with pytest.raises(ValueError):
        PotentialField(-0.1)


def test_sqp_reports_nonconvergence(model):
    nlp = transcribe(_small_spec(), model, model.limits)
    with pytest.raises(NonConvergenceError) as err:
        sqp.solve(nlp, initial_guess(nlp.spec, model.limits).vector(), max_iter=1)
    assert err.value.result is not None
