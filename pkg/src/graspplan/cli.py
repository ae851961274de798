"""Command line entry point and CSV export.

    graspplan plan|simulate|montecarlo|replan-bench --scenario PATH --out DIR
              [--seed S] [--trials N] [--deterministic]

Exit codes: 0 success, 1 usage or parse error, 2 solver failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import replanner, sim
from .errors import DeadlineError, GraspPlanError, ParseError, UnreachableError
from .model import Pose
from .planner import plan_three_phases
from .scenario import parse_scenario

CSV_HEADER = "# graspplan-csv v1"
EXIT_OK, EXIT_USAGE, EXIT_SOLVER, EXIT_IO = 0, 1, 2, 3
J = range(1, 8)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows):
    """CSV with the versioned header comment; floats in shortest round-trip form."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def read_csv(path):
    """(columns, rows of strings), skipping comment lines."""
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


# --------------------------------------------------------------------------
# file layouts

def trajectory_rows(grid):
    t = grid.times
    return [[k, t[k], *grid.Q[k], *grid.QD[k], *grid.V[k]] for k in range(grid.N + 1)]


TRAJ_COLS = ["k", "t"] + [f"q{i}" for i in J] + [f"qd{i}" for i in J] + [f"v{i}" for i in J]
META_COLS = ["phase", "status", "dT", "objective", "iterations", "stationarity", "feasibility",
             "complementarity", "wall_ms"]
TRACE_COLS = (["t"] + [f"q{i}" for i in J] + [f"qd{i}" for i in J] + [f"tau{i}" for i in J]
              + [f"ref_q{i}" for i in J] + ["err_norm", "phase"])
EVENT_COLS = ["t", "kind", "detail"]
REPLAN_COLS = ["t_event", "phase", "solve_ms", "objective", "clamp_flag", "deadline_miss"]
EKF_COLS = ["t"] + [f"z{i}" for i in range(1, 8)] + ["trace_P", "innovation_norm", "meas_available"]
TRIAL_COLS = ["trial", "seed", "x", "y", "z", "yaw", "outcome", "terminal_error", "plan_ms",
              "replan_mean_ms", "replan_max_ms", "deadline_misses", "reason"]


def write_plan(plan, out, deterministic=False):
    for i, g in enumerate(plan.grids, 1):
        write_csv(out / f"phase{i}.csv", TRAJ_COLS, trajectory_rows(g))
    rows = []
    for i, (r, ms) in enumerate(zip(plan.results, plan.wall_ms), 1):
        res = r.residuals
        rows.append([i, "converged", r.grid.dT, r.objective, r.iterations, res["stationarity"],
                     res["feasibility"], res["complementarity"], 0.0 if deterministic else ms])
    write_csv(out / "plan_meta.csv", META_COLS, rows)


def write_report(rep, out):
    rows = np.column_stack([rep.t, rep.q, rep.qdot, rep.tau, rep.ref_q, rep.err_norm, rep.phase]) \
        if rep.t.size else []
    trace = [[*r[:-1], int(r[-1])] for r in rows]
    write_csv(out / "trace.csv", TRACE_COLS, trace)
    write_csv(out / "events.csv", EVENT_COLS, [[e["t"], e["kind"], e["detail"]] for e in rep.events])
    write_replans(rep.replans, out / "replan_metrics.csv")
    ekf_rows = [[*r[:-1], int(r[-1])] for r in rep.ekf_log]
    write_csv(out / "ekf_log.csv", EKF_COLS, ekf_rows)


def write_replans(records, path):
    write_csv(path, REPLAN_COLS, [[r.t_event, r.phase, r.solve_ms, r.objective, r.clamp_flag,
                                   r.deadline_miss] for r in records])


# --------------------------------------------------------------------------
# commands

def cmd_plan(scenario, out_dir, deterministic=False):
    out = Path(out_dir)
    try:
        plan = plan_three_phases(scenario, scenario.object_pose)
    except UnreachableError as e:
        write_csv(out / "plan_meta.csv", META_COLS + ["message"],
                  [[0, "unreachable-error", *[float("nan")] * 3, 0, *[float("nan")] * 4, str(e)]])
        return EXIT_SOLVER
    except GraspPlanError as e:
        write_csv(out / "plan_meta.csv", META_COLS + ["message"],
                  [[0, "nonconvergence", *[float("nan")] * 3, 0, *[float("nan")] * 4, str(e)]])
        return EXIT_SOLVER
    write_plan(plan, out, deterministic)
    return EXIT_OK


def cmd_simulate(scenario, out_dir, seed=0, deterministic=False):
    out = Path(out_dir)
    rep = sim.run_scenario(scenario, seed, deterministic=deterministic)
    write_report(rep, out)
    write_csv(out / "sim_summary.csv", ["seed", "outcome", "terminal_error", "violations",
                                        "replans", "deadline_misses", "wall_ms", "reason"],
              [[seed, rep.outcome, rep.terminal_error, len(rep.violations), len(rep.replans),
                sum(r.deadline_miss for r in rep.replans), rep.wall_ms.get("total", 0.0),
                rep.reason]])
    return EXIT_SOLVER if rep.reason.startswith("planning") else EXIT_OK


def pool_size():
    try:
        cap = int(os.environ.get("GRASPPLAN_THREADS", "0"))
    except ValueError:
        cap = 0
    n = os.cpu_count() or 1
    return max(1, min(n, cap) if cap > 0 else n)


def _trial(args):
    scenario, index, seed, deterministic, noise = args
    return sim.run_trial(scenario, index, seed, deterministic, noise)


def cmd_montecarlo(scenario, trials, out_dir, seed=0, deterministic=False, noise=None):
    """Per-trial outcomes and the aggregate; trial i uses seed + i."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    out = Path(out_dir)
    jobs = [(scenario, i, seed + i, deterministic, noise) for i in range(trials)]
    workers = min(pool_size(), trials)
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_trial, jobs))
    else:
        results = [_trial(j) for j in jobs]
    write_csv(out / "trials.csv", TRIAL_COLS,
              [[r.index, r.seed, *r.position, r.yaw, r.outcome, r.terminal_error, r.plan_ms,
                r.replan_mean_ms, r.replan_max_ms, r.deadline_misses, r.reason] for r in results])
    ok = [r.outcome == "success" for r in results]
    plan_ms = np.array([r.plan_ms for r in results])
    rep_ms = np.array([r.replan_mean_ms for r in results])
    summary = dict(trials=trials, successes=int(sum(ok)), success_rate=float(np.mean(ok)),
                   plan_ms_mean=float(plan_ms.mean()), plan_ms_std=float(plan_ms.std()),
                   replan_ms_mean=float(rep_ms.mean()), replan_ms_std=float(rep_ms.std()),
                   deadline_misses=int(sum(r.deadline_misses for r in results)))
    write_csv(out / "montecarlo_summary.csv", list(summary), [list(summary.values())])
    return EXIT_OK, summary


def random_shifts(n, magnitude, seed):
    """Horizontal shifts of fixed length with uniform direction."""
    a = np.random.default_rng(seed).uniform(0.0, 2 * np.pi, n)
    return magnitude * np.column_stack([np.cos(a), np.sin(a), np.zeros(n)])


def read_shifts(path):
    data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    if data.shape[1] != 3:
        raise ValueError("shift file needs three columns dx, dy, dz (m)")
    return data


def replan_bench(scenario, plan, shifts, deadline_ms=None, deterministic=False):
    """Time one complete replan cycle (IK, assemble, solve, apply) per shift
    from the start of the offline plan.  Returns (records, retained flags)."""
    records, retained = [], []
    targets = (plan.q_pregrasp, plan.q_grasp)
    for d in shifts:
        tl = sim.Timeline(plan.grids)
        before = list(tl.grids)
        est = Pose(scenario.object_pose.rotation, scenario.object_pose.translation + d)
        t0 = time.perf_counter()
        try:
            new, _, rec = sim.replan_cycle(scenario, tl, 0.0, est, targets, deadline_ms)
            tl.replace(0.0, new)
            rec.solve_ms = 1e3 * (time.perf_counter() - t0)
        except GraspPlanError as e:
            ms = getattr(e, "elapsed_ms", 1e3 * (time.perf_counter() - t0))
            rec = sim.ReplanRecord(0.0, 1, ms, 0.0, False, isinstance(e, DeadlineError),
                                   type(e).__name__)
        if deterministic:
            rec.solve_ms = 0.0
        records.append(rec)
        retained.append(all(a is b for a, b in zip(before, tl.grids)))
    return records, retained


def cmd_replan_bench(scenario, shifts_file, out_dir, seed=0, deterministic=False, deadline_ms=None,
                     n_shifts=100, magnitude=0.01):
    out = Path(out_dir)
    shifts = read_shifts(shifts_file) if shifts_file else random_shifts(n_shifts, magnitude, seed)
    try:
        plan = plan_three_phases(scenario, scenario.object_pose)
    except GraspPlanError:
        return EXIT_SOLVER, {}
    deadline = None if deterministic else (scenario.deadline_ms if deadline_ms is None else deadline_ms)
    records, _ = replan_bench(scenario, plan, shifts, deadline, deterministic)
    write_replans(records, out / "replan_metrics.csv")
    ms = np.array([r.solve_ms for r in records])
    summary = dict(shifts=len(records), mean_ms=float(ms.mean()), std_ms=float(ms.std()),
                   max_ms=float(ms.max()), p99_ms=float(np.percentile(ms, 99)),
                   deadline_misses=int(sum(r.deadline_miss for r in records)),
                   deadline_ms=float("nan") if deadline is None else float(deadline))
    write_csv(out / "bench_summary.csv", list(summary), [list(summary.values())])
    return EXIT_OK, summary


# --------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="graspplan", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=["plan", "simulate", "montecarlo", "replan-bench"])
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--shifts", default=None, help="CSV of object shifts dx,dy,dz in m (replan-bench)")
    p.add_argument("--deadline-ms", type=float, default=None, help="override the replan deadline")
    p.add_argument("--noiseless", action="store_true", help="zero camera noise (simulate, montecarlo)")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_USAGE
    if args.trials < 1:
        print("error: --trials must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        scenario = parse_scenario(args.scenario)
    except ParseError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: cannot read scenario: {e}", file=sys.stderr)
        return EXIT_IO
    seed = scenario.seed if args.seed is None else args.seed
    noise = (0.0, 0.0) if args.noiseless else None
    if args.noiseless:
        scenario.sigma_t = scenario.sigma_r = 0.0
    try:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "plan":
            code = cmd_plan(scenario, out, args.deterministic)
        elif args.command == "simulate":
            code = cmd_simulate(scenario, out, seed, args.deterministic)
        elif args.command == "montecarlo":
            code, s = cmd_montecarlo(scenario, args.trials, out, seed, args.deterministic, noise)
            print(f"success rate {s['success_rate']:.3f} ({s['successes']}/{s['trials']})")
        else:
            try:
                code, s = cmd_replan_bench(scenario, args.shifts, out, seed, args.deterministic,
                                           args.deadline_ms)
            except ValueError as e:
                print(f"error: {e}", file=sys.stderr)
                return EXIT_USAGE
            if s:
                print(f"replan mean {s['mean_ms']:.2f} ms, p99 {s['p99_ms']:.2f} ms, "
                      f"max {s['max_ms']:.2f} ms, misses {s['deadline_misses']}")
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    return code


if __name__ == "__main__":
    sys.exit(main())
