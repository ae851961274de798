import numpy as np
import pytest

from graspplan import cli
from graspplan.model import Pose
from graspplan.scenario import nominal, nominal_path

SCN = str(nominal_path())


def _run(*args):
    return cli.main([str(a) for a in args])


def test_usage_errors(tmp_path):
    assert _run() == cli.EXIT_USAGE
    assert _run("fly", "--scenario", SCN, "--out", tmp_path) == cli.EXIT_USAGE
    assert _run("plan", "--scenario", SCN, "--out", tmp_path, "--seed", -1) == cli.EXIT_USAGE
    assert _run("montecarlo", "--scenario", SCN, "--out", tmp_path, "--trials", 0) == cli.EXIT_USAGE


def test_parse_and_io_errors(tmp_path):
    bad = tmp_path / "bad.scn"
    bad.write_text(nominal_path().read_text().replace("[55.0,", "[200.0,"))
    assert _run("plan", "--scenario", bad, "--out", tmp_path) == cli.EXIT_USAGE
    assert _run("plan", "--scenario", tmp_path / "none.scn", "--out", tmp_path) == cli.EXIT_IO
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert _run("plan", "--scenario", SCN, "--out", blocker / "sub") == cli.EXIT_IO


def test_plan_outputs(tmp_path):
    assert _run("plan", "--scenario", SCN, "--out", tmp_path) == cli.EXIT_OK
    for i in (1, 2, 3):
        path = tmp_path / f"phase{i}.csv"
        assert path.read_text().splitlines()[0] == cli.CSV_HEADER
        cols, rows = cli.read_csv(path)
        assert cols == cli.TRAJ_COLS and len(rows) == 101
    cols, rows = cli.read_csv(tmp_path / "plan_meta.csv")
    assert [r[cols.index("status")] for r in rows] == ["converged"] * 3
    assert all(float(r[cols.index("wall_ms")]) > 0 for r in rows)


def test_unreachable_object(tmp_path):
    s = nominal()
    s = s.with_object(Pose(s.object_pose.rotation, np.array([2.0, 0.0, 0.1])))
    assert cli.cmd_plan(s, tmp_path) == cli.EXIT_SOLVER
    cols, rows = cli.read_csv(tmp_path / "plan_meta.csv")
    assert rows[0][cols.index("status")] == "unreachable-error"


@pytest.mark.parametrize("command", ["plan", "simulate", "replan-bench"])
def test_deterministic_outputs(tmp_path, command):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert _run(command, "--scenario", SCN, "--out", out, "--seed", 5, "--deterministic") == 0
    files = sorted(p.name for p in a.iterdir())
    assert files == sorted(p.name for p in b.iterdir()) and files
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_zero_shift_bench(tmp_path):
    shifts = tmp_path / "zero.csv"
    shifts.write_text("# dx,dy,dz\n" + "0,0,0\n" * 20)
    code, s = cli.cmd_replan_bench(nominal(), shifts, tmp_path)
    assert code == 0 and s["shifts"] == 20 and s["max_ms"] < 5.0 and s["deadline_misses"] == 0


def test_forced_deadline_keeps_old_trajectory(nominal_plan, scenario):
    shifts = cli.random_shifts(5, 0.01, seed=3)
    records, retained = cli.replan_bench(scenario, nominal_plan, shifts, deadline_ms=1e-3)
    assert all(r.deadline_miss for r in records) and all(retained)
    records, retained = cli.replan_bench(scenario, nominal_plan, shifts, deadline_ms=None)
    assert not any(r.deadline_miss for r in records) and not any(retained)


def test_shift_file_validation(tmp_path):
    f = tmp_path / "s.csv"
    f.write_text("0.01,0.0\n")
    with pytest.raises(ValueError):
        cli.read_shifts(f)
    assert _run("replan-bench", "--scenario", SCN, "--out", tmp_path, "--shifts", f) == cli.EXIT_USAGE


def test_random_shifts_are_horizontal():
    d = cli.random_shifts(50, 0.01, seed=0)
    assert np.allclose(np.linalg.norm(d, axis=1), 0.01) and not np.any(d[:, 2])


def test_single_trial_aggregate(tmp_path):
    code, s = cli.cmd_montecarlo(nominal(), 1, tmp_path, seed=2, deterministic=True)
    cols, rows = cli.read_csv(tmp_path / "trials.csv")
    assert code == 0 and len(rows) == 1
    ok = rows[0][cols.index("outcome")] == "success"
    assert s["successes"] == int(ok) and s["success_rate"] == float(ok)
    assert s["plan_ms_mean"] == float(rows[0][cols.index("plan_ms")]) and s["plan_ms_std"] == 0.0


def test_zero_width_box_gives_identical_outcomes(tmp_path):
    s = nominal()
    s.box_lo = s.box_hi = np.array([0.65, 0.05, 0.1])
    s.yaw_range = (0.1, 0.1)
    code, summary = cli.cmd_montecarlo(s, 2, tmp_path, seed=0, deterministic=True, noise=(0.0, 0.0))
    cols, rows = cli.read_csv(tmp_path / "trials.csv")
    pick = lambda c: [r[cols.index(c)] for r in rows]
    assert len(set(pick("outcome"))) == 1 and len(set(pick("terminal_error"))) == 1
    assert pick("x")[0] == repr(0.65)


def test_pool_size(monkeypatch):
    monkeypatch.setenv("GRASPPLAN_THREADS", "1")
    assert cli.pool_size() == 1
    monkeypatch.setenv("GRASPPLAN_THREADS", "junk")
    assert cli.pool_size() >= 1


@pytest.mark.slow
def test_noiseless_montecarlo(tmp_path):
    code, s = cli.cmd_montecarlo(nominal(), 100, tmp_path, seed=0, deterministic=True,
                                 noise=(0.0, 0.0))
    assert code == 0 and s["successes"] >= 95
