"""Scenario files (YAML) and the validated Scenario object.

Angles in files are degrees, lengths meters.  Every key except ``q_S_deg``,
``q_T_deg`` and ``object.position`` has a default.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .dynamics import coriolis_envelope
from .errors import ParseError
from .model import NDOF, Pose, RobotModel, default_model, rot3
from .planner import GraspConfig
from .replanner import ReplanWeights

REQUIRED = ("q_S_deg", "q_T_deg", "object.position")

DEFAULTS = {
    "model": "default",
    "object": {"yaw_deg": 0.0, "motion": []},
    "grid": {"N": [100, 100, 100]},
    "potential": {"z_th": 0.15, "sigma": [5e-3, 2e-3]},
    "grasp": {"tilt_deg": 30.0, "pregrasp_offset": 0.05},
    "noise": {"sigma_t": 0.005, "sigma_r_deg": 1.0},
    "replanner": {"enabled": True, "period": 0.1, "deadline_ms": 100.0,
                  "dT_bounds": [0.0, 0.01], "v_bound": 10.0,
                  "weights": {"qx": [10.0, 1.0], "qv": 0.1, "qdt": 1.0}},
    "sim": {"dt": 0.001, "velocity_filter": 0.012, "camera_rate": 30.0,
            "K1": 100.0, "K2": 20.0, "K_P": 5.0, "K_I": 1.0,
            "success_gate": 0.005, "init_frames": 30},
    "ekf": {"Ta": 0.001},
    "montecarlo": {"box_lo": [0.6, -0.1, 0.1], "box_hi": [0.7, 0.1, 0.1],
                   "yaw_range_deg": [-20.0, 20.0]},
    "seed": 0,
}


@dataclass(frozen=True)
class Relocation:
    """Scripted object shift; fires at ``t`` or at a fraction of a planned phase."""
    shift: np.ndarray
    t: float | None = None
    phase: int | None = None
    fraction: float | None = None


@dataclass
class Scenario:
    model: RobotModel
    q_S: np.ndarray
    q_T: np.ndarray
    object_pose: Pose
    motion: list = field(default_factory=list)
    N: tuple = (100, 100, 100)
    z_th: float = 0.15
    Sigma: np.ndarray = field(default_factory=lambda: np.diag([5e-3, 2e-3]))
    grasp: GraspConfig = field(default_factory=GraspConfig)
    sigma_t: float = 0.005
    sigma_r: float = np.deg2rad(1.0)
    replan: bool = True
    replan_period: float = 0.1
    deadline_ms: float = 100.0
    dT_bounds: tuple = (0.0, 0.01)
    v_bound: float = 10.0
    weights: ReplanWeights = field(default_factory=ReplanWeights)
    dt: float = 0.001
    filter_tc: float | None = 0.012
    camera_rate: float = 30.0
    K1: float = 100.0
    K2: float = 20.0
    K_P: float = 5.0
    K_I: float = 1.0
    success_gate: float = 0.005
    init_frames: int = 30
    Ta: float = 0.001
    box_lo: np.ndarray = field(default_factory=lambda: np.array([0.6, -0.1, 0.1]))
    box_hi: np.ndarray = field(default_factory=lambda: np.array([0.7, 0.1, 0.1]))
    yaw_range: tuple = (np.deg2rad(-20.0), np.deg2rad(20.0))
    seed: int = 0
    source: str = ""

    @property
    def limits(self):
        return self.model.limits

    def envelope(self):
        return _envelope(self.model)

    def with_object(self, pose, motion=None):
        s = copy.copy(self)
        s.object_pose = pose
        if motion is not None:
            s.motion = list(motion)
        return s


_ENVELOPES = {}


def _envelope(model):
    # keyed by identity; the model is kept alive alongside its envelope
    hit = _ENVELOPES.get(id(model))
    if hit is None or hit[0] is not model:
        hit = (model, coriolis_envelope(model, model.limits))
        _ENVELOPES[id(model)] = hit
    return hit[1]


# --------------------------------------------------------------------------
# parsing

def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _get(d, path):
    cur = d
    for part in path.split("."):
        if not isinstance(cur, dict) or part not in cur:
            raise KeyError(path)
        cur = cur[part]
    return cur


class _Reader:
    def __init__(self, data, lines):
        self.data = data
        self.lines = lines

    def line(self, key):
        return self.lines.get(key.split(".")[0])

    def fail(self, key, msg):
        line = self.line(key)
        where = f" (line {line})" if line else ""
        raise ParseError(f"{key}: {msg}{where}", key=key, line=line)

    def num(self, key, positive=False, nonneg=False):
        v = _get(self.data, key)
        try:
            x = float(v)
        except (TypeError, ValueError):
            self.fail(key, f"expected a number, got {v!r}")
        if not np.isfinite(x):
            self.fail(key, "must be finite")
        if positive and x <= 0:
            self.fail(key, "must be positive")
        if nonneg and x < 0:
            self.fail(key, "must be nonnegative")
        return x

    def vec(self, key, n=None, positive=False):
        v = _get(self.data, key)
        try:
            a = np.asarray(v, dtype=float)
        except (TypeError, ValueError):
            self.fail(key, f"expected a list of numbers, got {v!r}")
        if a.ndim != 1 or (n is not None and a.size != n):
            self.fail(key, f"expected {n} numbers")
        if not np.all(np.isfinite(a)):
            self.fail(key, "entries must be finite")
        if positive and np.any(a <= 0):
            self.fail(key, "entries must be positive")
        return a


def _top_level_lines(text):
    lines = {}
    for i, raw in enumerate(text.splitlines(), 1):
        if raw and not raw[0].isspace() and not raw.startswith("#") and ":" in raw:
            lines.setdefault(raw.split(":", 1)[0].strip(), i)
    return lines


def parse_scenario_text(text, source="<string>", base_dir=None):
    try:
        raw = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ParseError(f"{source}: invalid YAML ({e})", line=line) from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ParseError(f"{source}: top level must be a mapping", line=1)
    lines = _top_level_lines(text)
    missing = []
    for key in REQUIRED:
        try:
            _get(raw, key)
        except KeyError:
            missing.append(key)
    if missing:
        raise ParseError(f"{source}: missing keys: {', '.join(missing)}", key=missing[0])
    data = _merge(DEFAULTS, raw)
    r = _Reader(data, lines)

    model_ref = data["model"]
    if model_ref in (None, "default"):
        model = default_model()
    else:
        path = Path(model_ref)
        if not path.is_absolute() and base_dir is not None:
            path = Path(base_dir) / path
        if not path.exists():
            r.fail("model", f"file not found: {path}")
        model = RobotModel.from_file(path)
    limits = model.limits

    q = {}
    for key in ("q_S_deg", "q_T_deg"):
        v = np.deg2rad(r.vec(key, NDOF))
        bad = np.flatnonzero(np.abs(v) > limits.q_max + 1e-12)
        if bad.size:
            j = int(bad[0])
            r.fail(key, f"joint {j + 1} at {np.rad2deg(v[j]):.1f} deg exceeds the "
                        f"{np.rad2deg(limits.q_max[j]):.0f} deg limit")
        q[key] = v

    pos = r.vec("object.position", 3)
    yaw = np.deg2rad(r.num("object.yaw_deg"))
    motion = []
    script = data["object"].get("motion") or []
    if not isinstance(script, list):
        r.fail("object.motion", "expected a list")
    for i, ev in enumerate(script):
        key = f"object.motion[{i}]"
        if not isinstance(ev, dict) or "shift" not in ev:
            r.fail(key, "each event needs a shift")
        sub = _Reader({"e": ev}, lines)
        try:
            shift = sub.vec("e.shift", 3)
            if "t" in ev:
                motion.append(Relocation(shift, t=sub.num("e.t", nonneg=True)))
            elif "phase" in ev:
                ph = int(ev["phase"])
                frac = sub.num("e.fraction", nonneg=True) if "fraction" in ev else 0.0
                if ph not in (1, 2, 3) or frac > 1:
                    raise ParseError("phase must be 1..3 and fraction in [0, 1]")
                motion.append(Relocation(shift, phase=ph, fraction=frac))
            else:
                raise ParseError("needs t or phase")
        except (ParseError, KeyError) as e:
            r.fail(key, str(e))

    N = r.vec("grid.N", 3)
    if np.any(N < 2) or np.any(N != np.round(N)):
        r.fail("grid.N", "grid sizes must be integers >= 2")
    sig = r.vec("potential.sigma", 2, positive=True)
    w = data["replanner"]["weights"]
    weights = ReplanWeights.for_dof(NDOF, tuple(r.vec("replanner.weights.qx", 2, positive=True)),
                                    r.num("replanner.weights.qv", positive=True),
                                    r.num("replanner.weights.qdt", positive=True)) if w else ReplanWeights()
    dTb = r.vec("replanner.dT_bounds", 2)
    if dTb[0] > dTb[1]:
        r.fail("replanner.dT_bounds", "lower bound above upper bound")
    lo = r.vec("montecarlo.box_lo", 3)
    hi = r.vec("montecarlo.box_hi", 3)
    if np.any(lo > hi):
        r.fail("montecarlo.box_lo", "box corner above the upper corner")
    yr = np.deg2rad(r.vec("montecarlo.yaw_range_deg", 2))
    tc = data["sim"].get("velocity_filter")
    enabled = data["replanner"]["enabled"]
    if not isinstance(enabled, bool):
        r.fail("replanner.enabled", "expected true or false")
    seed = data["seed"]
    if not isinstance(seed, int) or seed < 0:
        r.fail("seed", "expected a nonnegative integer")

    grasp = GraspConfig(tilt=np.deg2rad(r.num("grasp.tilt_deg")),
                        pregrasp_offset=r.num("grasp.pregrasp_offset", nonneg=True))
    try:
        grasp.q_open, grasp.q_closed
    except Exception as e:        # gripper states are fixed; guard model edits
        r.fail("grasp", str(e))

    return Scenario(
        model=model, q_S=q["q_S_deg"], q_T=q["q_T_deg"],
        object_pose=Pose(rot3("z", yaw), pos), motion=motion,
        N=tuple(int(n) for n in N), z_th=r.num("potential.z_th", positive=True),
        Sigma=np.diag(sig), grasp=grasp,
        sigma_t=r.num("noise.sigma_t", nonneg=True),
        sigma_r=np.deg2rad(r.num("noise.sigma_r_deg", nonneg=True)),
        replan=enabled, replan_period=r.num("replanner.period", positive=True),
        deadline_ms=r.num("replanner.deadline_ms", positive=True),
        dT_bounds=(float(dTb[0]), float(dTb[1])), v_bound=r.num("replanner.v_bound", positive=True),
        weights=weights, dt=r.num("sim.dt", positive=True),
        filter_tc=None if tc in (None, 0) else r.num("sim.velocity_filter", positive=True),
        camera_rate=r.num("sim.camera_rate", positive=True),
        K1=r.num("sim.K1", positive=True), K2=r.num("sim.K2", positive=True),
        K_P=r.num("sim.K_P", nonneg=True), K_I=r.num("sim.K_I", nonneg=True),
        success_gate=r.num("sim.success_gate", positive=True),
        init_frames=int(r.num("sim.init_frames", positive=True)),
        Ta=r.num("ekf.Ta", positive=True), box_lo=lo, box_hi=hi, yaw_range=(yr[0], yr[1]),
        seed=seed, source=source,
    )


def parse_scenario(path):
    path = Path(path)
    text = path.read_text()       # OSError propagates: an I/O failure, not a parse error
    return parse_scenario_text(text, str(path), base_dir=path.parent)


def nominal_path():
    return Path(__file__).with_name("data") / "nominal.scn"


def nominal():
    return parse_scenario(nominal_path())
