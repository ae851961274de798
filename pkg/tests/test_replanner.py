import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graspplan.dynamics import reduced_dynamics, reduced_dynamics_jacobians
from graspplan.errors import DeadlineError, ReplanInfeasibleError
from graspplan.replanner import (DeviationVector, ReplanWeights, apply_update, assemble,
                                 linearize, qp_residual, solve, within_limits)


def _shift(n=7, dq=None):
    dx = np.zeros(2 * n)
    dx[:n] = dq if dq is not None else 0.02 * np.sin(np.arange(n) + 1.0)
    return dx


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=25, deadline=None)
def test_linearization_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x, v = rng.normal(size=14), rng.normal(size=7)
    Gx, Gv = reduced_dynamics_jacobians(7)
    h = 1e-6
    fx = np.column_stack([(reduced_dynamics(x + h * e, v) - reduced_dynamics(x - h * e, v)) / (2 * h)
                          for e in np.eye(14)])
    fv = np.column_stack([(reduced_dynamics(x, v + h * e) - reduced_dynamics(x, v - h * e)) / (2 * h)
                          for e in np.eye(7)])
    assert np.abs(fx - Gx).max() < 1e-7 and np.abs(fv - Gv).max() < 1e-7


def test_linearize_shapes(nominal_plan):
    g = nominal_plan.grids[0]
    Gx, Gv = linearize(g)
    assert Gx.shape == (g.N + 1, 14, 14) and Gv.shape == (g.N + 1, 14, 7)


def test_fixed_duration_update_preserves_residual(scenario, nominal_plan):
    g = nominal_plan.grids[0]
    r0 = g.collocation_residual()
    prob = assemble(g, g.X[0], g.X[-1] + _shift(), limits=scenario.limits, dT_bounds=(0.0, 0.0))
    dev, info = solve(prob, deadline=None)
    assert dev.dT == 0.0
    new = apply_update(g, dev)
    assert np.abs(new.collocation_residual() - r0).max() < 1e-10
    assert np.allclose(new.X[-1], g.X[-1] + _shift(), atol=1e-12)
    assert np.array_equal(new.X[0], g.X[0])


def test_duration_update_residual_is_second_order(scenario, nominal_plan):
    g = nominal_plan.grids[0]
    errs = []
    r0 = g.collocation_residual()
    for a in (1.0, 0.5):
        prob = assemble(g, g.X[0], g.X[-1] + a * _shift(), limits=scenario.limits,
                        dT_bounds=(-0.05, 0.05))
        dev, _ = solve(prob, deadline=None)
        assert dev.dT != 0.0
        errs.append(np.abs(apply_update(g, dev).collocation_residual() - r0).max())
    assert errs[0] < 1e-5
    # δT·δF cross term: halving the shift quarters the linearization error
    assert errs[1] == pytest.approx(0.25 * errs[0], rel=0.05)


def test_qp_solution_kkt(scenario, nominal_plan):
    for j, g in enumerate(nominal_plan.grids[:2]):
        prob = assemble(g, g.X[0], g.X[-1] + _shift(), limits=scenario.limits, start=10 * j)
        dev, info = solve(prob, deadline=None)
        assert info["residual"] < 1e-8
        assert qp_residual(prob, dev) < 1e-8
        assert within_limits(apply_update(g, dev), scenario.limits)
        # executed nodes are untouched
        assert not np.any(dev.dX[:10 * j]) and not np.any(dev.dV[:10 * j])


def test_zero_shift_is_a_fixed_point(scenario, nominal_plan):
    g = nominal_plan.grids[1]
    prob = assemble(g, g.X[0], g.X[-1], limits=scenario.limits)
    dev, info = solve(prob)
    assert dev.is_zero and info["iterations"] == 0
    assert apply_update(g, dev) is g
    new = apply_update(g, DeviationVector.zero(g.N))
    assert new.X is g.X and new.V is g.V


def test_deadline_raises(scenario, nominal_plan):
    g = nominal_plan.grids[0]
    prob = assemble(g, g.X[0], g.X[-1] + _shift(), limits=scenario.limits)
    with pytest.raises(DeadlineError):
        solve(prob, deadline=1e-6)


def test_infeasible_box(scenario, nominal_plan):
    g = nominal_plan.grids[0]
    with pytest.raises(ReplanInfeasibleError):
        assemble(g, g.X[0], g.X[-1], dT_bounds=(0.1, 0.0))


def test_boundary_clamp_flag(scenario, nominal_plan):
    g = nominal_plan.grids[0]
    far = g.X[-1].copy()
    far[0] = 100.0
    prob = assemble(g, g.X[0], far, limits=scenario.limits)
    assert prob.clamp_flag
    assert not assemble(g, g.X[0], g.X[-1], limits=scenario.limits).clamp_flag


def test_start_node_range(nominal_plan):
    g = nominal_plan.grids[0]
    with pytest.raises(ValueError):
        assemble(g, g.X[0], g.X[-1], start=g.N)


def test_weights_validation():
    with pytest.raises(ValueError):
        ReplanWeights(Q_v=-np.eye(7))
    with pytest.raises(ValueError):
        ReplanWeights(Q_dT=0.0)
    with pytest.raises(ValueError):
        ReplanWeights(Q_x=np.eye(10))
    Q = ReplanWeights.for_dof(7).block()
    assert Q.shape == (22, 22) and np.all(np.linalg.eigvalsh(Q) > 0)


def test_interior_point_fallback(monkeypatch, scenario, nominal_plan):
    from graspplan import replanner
    from graspplan.qp import QPResult
    g = nominal_plan.grids[0]
    prob = assemble(g, g.X[0], g.X[-1] + _shift(), limits=scenario.limits)
    ref, _ = solve(prob, deadline=None)
    stalled = lambda H, *a, **k: QPResult(np.zeros(H.shape[0]), None, None, 0, False, np.inf)
    monkeypatch.setattr(replanner, "active_set", stalled)
    dev, info = solve(prob, deadline=None)
    assert info["residual"] < 1e-8
    assert np.abs(dev.dX - ref.dX).max() < 1e-7 and abs(dev.dT - ref.dT) < 1e-9
