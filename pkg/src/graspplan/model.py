"""Kinematic chain, forward/inverse kinematics and SDH2 grasp-point kinematics."""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import _kernels as K
from .errors import (FrameError, GripperLimitError, InfeasibleGraspError,
                     ParseError, UnreachableError)

NDOF = 7


# --------------------------------------------------------------------------
# homogeneous transforms

def trans(axis, d):
    H = np.eye(4)
    H["xyz".index(axis), 3] = d
    return H


def rot(axis, angle):
    c, s = np.cos(angle), np.sin(angle)
    H = np.eye(4)
    i, j = {"x": (1, 2), "y": (2, 0), "z": (0, 1)}[axis]
    H[i, i] = c
    H[i, j] = -s
    H[j, i] = s
    H[j, j] = c
    return H


def rot3(axis, angle):
    return rot(axis, angle)[:3, :3]


@dataclass(frozen=True)
class Pose:
    """Rigid transform: rotation (3x3, SO(3)) and translation (m)."""

    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, H):
        H = np.asarray(H, dtype=float)
        return cls(H[:3, :3].copy(), H[:3, 3].copy())

    def matrix(self):
        H = np.eye(4)
        H[:3, :3] = self.rotation
        H[:3, 3] = self.translation
        return H

    def __matmul__(self, other):
        if isinstance(other, Pose):
            return Pose(self.rotation @ other.rotation,
                        self.rotation @ other.translation + self.translation)
        return self.rotation @ np.asarray(other) + self.translation

    def inverse(self):
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)


def rotation_angle(R):
    """Geodesic angle of a rotation matrix."""
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(c))


def rotation_log(R):
    """Axis-angle vector of R (inverse of the exponential map)."""
    theta = rotation_angle(R)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-9:
        return 0.5 * w
    if np.pi - theta < 1e-6:
        # near pi: take the axis from the symmetric part
        A = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(A)))
        axis = A[:, k] / np.sqrt(A[k, k])
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * w


# --------------------------------------------------------------------------
# robot description

@dataclass(frozen=True)
class Limits:
    q_max: np.ndarray
    qdot_max: np.ndarray
    tau_max: np.ndarray

    def __post_init__(self):
        for name in ("q_max", "qdot_max", "tau_max"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (NDOF,) or np.any(arr <= 0):
                raise ValueError(f"{name} must hold 7 positive entries")
            object.__setattr__(self, name, arr)

    @property
    def x_max(self):
        return np.concatenate([self.q_max, self.qdot_max])

    def scaled(self, qdot_factor=1.0):
        return Limits(self.q_max, self.qdot_max * qdot_factor, self.tau_max)


@dataclass(frozen=True)
class GripperGeometry:
    """Planar two-phalanx model of SDH2 fingers 1 and 3 (approximate values)."""

    base_half_width: float = 0.033
    base_height: float = 0.05
    proximal: float = 0.0865
    distal_to_arc: float = 0.035
    arc_radius: float = 0.01


@dataclass(frozen=True)
class RobotModel:
    d: np.ndarray              # d_1..d_7
    d_e: float
    l_c: float
    d_c: float
    theta_c: float             # rad
    d_h: float
    mass: np.ndarray           # (7,)
    com: np.ndarray            # (7, 3)
    inertia: np.ndarray        # (7, 3, 3)
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    limits: Limits | None = None
    gripper: GripperGeometry = GripperGeometry()

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float)
        mass = np.asarray(self.mass, dtype=float)
        com = np.asarray(self.com, dtype=float)
        inertia = np.asarray(self.inertia, dtype=float)
        if d.shape != (NDOF,) or mass.shape != (NDOF,):
            raise ValueError("model needs exactly 7 revolute joints")
        if np.any(mass <= 0):
            raise ValueError("link masses must be positive")
        for I in inertia:
            if not np.allclose(I, I.T, atol=1e-12) or np.linalg.eigvalsh(I).min() <= 0:
                raise ValueError("link inertia tensors must be symmetric positive definite")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "mass", mass)
        object.__setattr__(self, "com", com.reshape(NDOF, 3))
        object.__setattr__(self, "inertia", inertia.reshape(NDOF, 3, 3))
        object.__setattr__(self, "gravity", np.asarray(self.gravity, dtype=float))
        object.__setattr__(self, "fixed", joint_fixed_transforms(d))
        object.__setattr__(self, "tools", {
            "end_effector": trans("z", self.d_e),
            "camera": (trans("y", self.l_c) @ trans("z", self.d_c)
                       @ rot("z", np.pi) @ rot("x", self.theta_c)),
            "hand": trans("z", self.d_h) @ rot("z", np.pi / 2),
        })

    @property
    def dyn_args(self):
        return (self.fixed, self.mass, self.com, self.inertia, self.gravity)

    def with_gravity(self, gravity):
        return RobotModel(self.d, self.d_e, self.l_c, self.d_c, self.theta_c, self.d_h,
                          self.mass, self.com, self.inertia, np.asarray(gravity, float),
                          self.limits, self.gripper)

    @classmethod
    def from_file(cls, path):
        text = Path(path).read_text()
        return cls.from_dict(yaml.safe_load(text) or {}, source=str(path))

    @classmethod
    def from_dict(cls, cfg, source="<model>"):
        def get(path):
            node = cfg
            for part in path.split("."):
                if not isinstance(node, dict) or part not in node:
                    raise ParseError(f"{source}: missing key '{path}'", key=path)
                node = node[part]
            return node

        links = get("links")
        if not isinstance(links, list) or len(links) != NDOF:
            raise ParseError(f"{source}: 'links' must list 7 entries", key="links")
        try:
            d = [float(l["d"]) for l in links]
            mass = [float(l["mass"]) for l in links]
            com = [np.asarray(l["com"], float) for l in links]
            inertia = [np.asarray(l["inertia"], float) for l in links]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{source}: bad link entry ({exc})", key="links") from exc
        lim = Limits(np.deg2rad(get("limits.q_max")), np.deg2rad(get("limits.qdot_max")),
                     np.asarray(get("limits.tau_max"), float))
        grip = cfg.get("gripper") or {}
        return cls(
            d=d,
            d_e=float(cfg.get("end_effector", {}).get("d_e", 0.0)),
            l_c=float(get("camera.l_c")),
            d_c=float(get("camera.d_c")),
            theta_c=float(np.deg2rad(get("camera.theta_c"))),
            d_h=float(get("hand.d_h")),
            mass=mass, com=com, inertia=inertia,
            gravity=np.asarray(cfg.get("gravity", [0.0, 0.0, -9.81]), float),
            limits=lim,
            gripper=GripperGeometry(**{k: float(v) for k, v in grip.items()}),
        )


def joint_fixed_transforms(d):
    """Constant part of each joint transform, one row of the kinematic table each."""
    pi = np.pi
    return np.array([
        trans("z", d[0]),
        trans("z", d[1]) @ rot("z", -pi) @ rot("x", pi / 2),
        trans("y", d[2]) @ rot("z", pi) @ rot("x", pi / 2),
        trans("z", d[3]) @ rot("x", pi / 2),
        trans("y", d[4]) @ rot("z", pi) @ rot("x", pi / 2),
        trans("y", d[5]) @ rot("x", pi / 2),
        trans("z", d[6]) @ rot("z", pi) @ rot("x", pi / 2),
    ])


def default_model_path():
    return Path(str(resources.files("graspplan") / "data" / "iiwa14.yaml"))


_DEFAULT = None


def default_model():
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = RobotModel.from_file(default_model_path())
    return _DEFAULT


@dataclass(frozen=True)
class JointState:
    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        qd = np.asarray(self.qdot, dtype=float)
        if q.shape != (NDOF,) or qd.shape != (NDOF,):
            raise ValueError("joint state needs 7 positions and 7 velocities")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))):
            raise ValueError("joint state must be finite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "qdot", qd)

    @property
    def x(self):
        return np.concatenate([self.q, self.qdot])


# --------------------------------------------------------------------------
# arm kinematics

def _check_q(q):
    q = np.asarray(q, dtype=float)
    if q.shape != (NDOF,) or not np.all(np.isfinite(q)):
        raise ValueError("q must be a finite 7-vector")
    return q


def frame_transform(model, q, frame):
    """4x4 world transform of a named frame; frame is a tag or a link index 1..7."""
    T = K.chain(_check_q(q), model.fixed)
    return _select(model, T, frame)


def _select(model, T, frame):
    if isinstance(frame, (int, np.integer)) and not isinstance(frame, bool):
        if 0 <= frame <= NDOF:
            return T[frame]
        raise FrameError(f"no link {frame}")
    if isinstance(frame, str):
        if frame.startswith("link"):
            try:
                return _select(model, T, int(frame[4:]))
            except ValueError:
                pass
        elif frame in model.tools:
            return T[NDOF] @ model.tools[frame]
    raise FrameError(f"unknown frame {frame!r}")


def forward_kinematics(model, q, frame="end_effector"):
    return Pose.from_matrix(frame_transform(model, q, frame))


def position_jacobian(model, q, frame="end_effector", point=None):
    """3x7 Jacobian of the frame origin (or of `point`, given in that frame)."""
    q = _check_q(q)
    T = K.chain(q, model.fixed)
    H = _select(model, T, frame)
    p = H[:3, 3] if point is None else H[:3, :3] @ np.asarray(point, float) + H[:3, 3]
    J = K.point_jacobian(T, p)
    if isinstance(frame, (int, np.integer)) or (isinstance(frame, str) and frame.startswith("link")):
        link = frame if isinstance(frame, (int, np.integer)) else int(frame[4:])
        J[:, link:] = 0.0
    return J


def orientation_jacobian(model, q, frame="end_effector"):
    q = _check_q(q)
    T = K.chain(q, model.fixed)
    _select(model, T, frame)
    J = K.angular_jacobian(T)
    if isinstance(frame, (int, np.integer)) or (isinstance(frame, str) and frame.startswith("link")):
        link = frame if isinstance(frame, (int, np.integer)) else int(frame[4:])
        J[:, link:] = 0.0
    return J


def pose_error(a, b):
    """Translation norm plus geodesic rotation angle between two poses."""
    return (float(np.linalg.norm(a.translation - b.translation))
            + rotation_angle(a.rotation.T @ b.rotation))


def inverse_kinematics(model, target, frame="end_effector", seed=None, limits=None,
                       damping=1e-3, max_iter=200, tol=1e-6, point=None):
    """Damped least-squares IK for the full 6-D pose of `frame`.

    With `point` (coordinates in `frame`), that point is driven to
    ``target.translation`` instead of the frame origin.
    """
    limits = limits or model.limits
    q = _check_q(seed if seed is not None else np.zeros(NDOF)).copy()
    qmax = limits.q_max if limits is not None else np.full(NDOF, np.inf)
    offset = np.zeros(3) if point is None else np.asarray(point, float)

    def residual(q):
        H = frame_transform(model, q, frame)
        p = H[:3, :3] @ offset + H[:3, 3]
        e_p = target.translation - p
        e_r = rotation_log(target.rotation @ H[:3, :3].T)
        return np.concatenate([e_p, e_r]), H

    e, H = residual(q)
    err = np.linalg.norm(e[:3]) + np.linalg.norm(e[3:])
    lam2 = damping ** 2
    for _ in range(max_iter):
        if err < tol:
            return q
        J = np.vstack([position_jacobian(model, q, frame, point=offset if point is not None else None),
                       orientation_jacobian(model, q, frame)])
        dq = J.T @ np.linalg.solve(J @ J.T + lam2 * np.eye(6), e)
        step = np.max(np.abs(dq))
        if step > 0.3:
            dq *= 0.3 / step
        q = np.clip(q + dq, -qmax, qmax)
        e, H = residual(q)
        err = np.linalg.norm(e[:3]) + np.linalg.norm(e[3:])
    if err < tol:
        return q
    raise UnreachableError(f"IK did not converge (residual {err:.3g})", residual=err)


# --------------------------------------------------------------------------
# SDH2 gripper

GRIPPER_Q_MAX = np.deg2rad(90.0)
# grasp-state box [d_G, phi_G, y_G, z_G]
GRASP_MIN = np.array([0.0, np.deg2rad(-10.0), -0.030, 0.160])
GRASP_MAX = np.array([0.080, np.deg2rad(10.0), 0.030, 0.170])
# finger 2 parked; fingers 1 and 3 rotated to face each other
FINGER2_PARK = (np.pi / 2, np.pi / 3)
FINGER_BASE_ROTATION = (-np.pi / 2, np.pi / 2)


@dataclass(frozen=True)
class GraspState:
    d_G: float
    phi_G: float
    y_G: float
    z_G: float

    def as_array(self):
        return np.array([self.d_G, self.phi_G, self.y_G, self.z_G])


def gripper_state(q_h, check=True):
    q_h = np.asarray(q_h, dtype=float)
    if q_h.shape != (4,) or not np.all(np.isfinite(q_h)):
        raise GripperLimitError("gripper state needs 4 finite joint angles")
    if check and np.any(np.abs(q_h) > GRIPPER_Q_MAX + 1e-12):
        raise GripperLimitError(f"gripper joints outside +-90 deg: {np.rad2deg(q_h)}")
    return q_h


def arc_centres(q_h, geom=GripperGeometry()):
    """Arc centres C1, C3 of fingers 1 and 3 in the hand frame."""
    a1, b1, a3, b3 = gripper_state(q_h)
    l1, l2 = geom.proximal, geom.distal_to_arc
    b, z0 = geom.base_half_width, geom.base_height
    c1 = np.array([0.0,
                   b - l1 * np.sin(a1) - l2 * np.sin(a1 + b1),
                   z0 + l1 * np.cos(a1) + l2 * np.cos(a1 + b1)])
    c3 = np.array([0.0,
                   -b + l1 * np.sin(a3) + l2 * np.sin(a3 + b3),
                   z0 + l1 * np.cos(a3) + l2 * np.cos(a3 + b3)])
    return c1, c3


def sdh2_forward(q_h, geom=GripperGeometry()):
    """Grasp point G (hand frame): midpoint of the two arc centres."""
    c1, c3 = arc_centres(q_h, geom)
    return 0.5 * (c1 + c3)


def grasp_state_of(q_h, geom=GripperGeometry()):
    c1, c3 = arc_centres(q_h, geom)
    g = 0.5 * (c1 + c3)
    delta = c1 - c3
    dist = np.hypot(delta[1], delta[2])
    return GraspState(dist - 2.0 * geom.arc_radius, float(np.arctan2(delta[2], delta[1])),
                      float(g[1]), float(g[2]))


def _planar_ik(u, w, l1, l2):
    r2 = u * u + w * w
    c = (r2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
    if c > 1.0 or c < -1.0:
        raise InfeasibleGraspError("finger cannot reach the requested arc centre")
    beta = np.arccos(c)  # distal joint curls inward
    alpha = np.arctan2(u, w) - np.arctan2(l2 * np.sin(beta), l1 + l2 * np.cos(beta))
    return alpha, beta


def sdh2_inverse(g, geom=GripperGeometry()):
    """Gripper joints [q_h2, q_h3, q_h7, q_h8] realising a grasp state."""
    arr = g.as_array() if isinstance(g, GraspState) else np.asarray(g, float)
    if np.any(arr < GRASP_MIN - 1e-12) or np.any(arr > GRASP_MAX + 1e-12):
        raise InfeasibleGraspError(f"grasp state outside the admissible box: {arr}")
    d, phi, y, z = arr
    half = 0.5 * d + geom.arc_radius
    u_dir = np.array([np.cos(phi), np.sin(phi)])
    c1 = np.array([y, z]) + half * u_dir
    c3 = np.array([y, z]) - half * u_dir
    b, z0 = geom.base_half_width, geom.base_height
    a1, b1 = _planar_ik(b - c1[0], c1[1] - z0, geom.proximal, geom.distal_to_arc)
    a3, b3 = _planar_ik(c3[0] + b, c3[1] - z0, geom.proximal, geom.distal_to_arc)
    q_h = np.array([a1, b1, a3, b3])
    if np.any(np.abs(q_h) > GRIPPER_Q_MAX):
        raise InfeasibleGraspError("grasp state needs gripper joints beyond +-90 deg")
    return q_h


PREGRASP = GraspState(0.070, 0.0, 0.0, 0.165)
