"""Quaternion EKF for the object pose seen from the wrist camera.

State z = [r (unit quaternion, scalar first), d (m)] where r encodes the
camera-to-object rotation R_c^o and d = p_0^o - p_0^c is the camera-to-object
offset in world axes.  For a static object the offset moves with the negated
camera velocity, and the rotation with the negated camera angular rate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import _kernels as K
from .model import NDOF, Pose

CAMERA = "camera"


# --------------------------------------------------------------------------
# quaternion helpers (scalar first)

def quat_normalize(r):
    r = np.asarray(r, float)
    return r / np.linalg.norm(r)


def quat_from_matrix(R):
    x, y, z, w = Rotation.from_matrix(R).as_quat()
    r = np.array([w, x, y, z])
    return r if r[0] >= 0 else -r


def matrix_from_quat(r):
    r = quat_normalize(r)
    return Rotation.from_quat([r[1], r[2], r[3], r[0]]).as_matrix()


def quat_multiply(a, b):
    a0, av = a[0], np.asarray(a[1:])
    b0, bv = b[0], np.asarray(b[1:])
    return np.concatenate([[a0 * b0 - av @ bv], a0 * bv + b0 * av + np.cross(av, bv)])


def omega_matrix(w):
    """Ω(ω) with Ω r = r ⊗ [0, ω]; skew-symmetric."""
    wx, wy, wz = np.asarray(w, float)
    return np.array([[0.0, -wx, -wy, -wz],
                     [wx, 0.0, wz, -wy],
                     [wy, -wz, 0.0, wx],
                     [wz, wy, -wx, 0.0]])


def omega_left(w):
    """Ω_L(ω) with Ω_L r = [0, ω] ⊗ r, the spatial-rate counterpart of Ω."""
    wx, wy, wz = np.asarray(w, float)
    return np.array([[0.0, -wx, -wy, -wz],
                     [wx, 0.0, -wz, wy],
                     [wy, wz, 0.0, -wx],
                     [wz, -wy, wx, 0.0]])


def _xi_left(r):
    """d(Ω_L(ω) r)/dω, a 4×3 matrix."""
    r0, r1, r2, r3 = r
    return np.array([[-r1, -r2, -r3],
                     [r0, r3, -r2],
                     [-r3, r0, r1],
                     [r2, -r1, r0]])


# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EkfConfig:
    Ta: float = 1e-3
    Q_process: np.ndarray = field(default_factory=lambda: np.diag([1e-4] * 3 + [1e-6] * 3))
    R_meas: np.ndarray = field(default_factory=lambda: np.diag([1e-4] * 4 + [2.5e-5] * 3))
    # relocation test: W times the squared Mahalanobis norm of the mean
    # translation innovation over the last W updates (χ²(3) under no motion);
    # above the threshold the covariance restarts from P0
    gate_stat: float = 30.0
    gate_window: int = 12
    P0: np.ndarray = field(default_factory=lambda: np.diag([1e-2] * 4 + [1e-2] * 3))

    def __post_init__(self):
        if not self.Ta > 0:
            raise ValueError("Ta must be positive")
        for name, shape in (("Q_process", (6, 6)), ("R_meas", (7, 7)), ("P0", (7, 7))):
            M = np.asarray(getattr(self, name), float)
            if M.shape != shape:
                raise ValueError(f"{name} must be {shape[0]}x{shape[1]}")
            if np.linalg.eigvalsh(0.5 * (M + M.T)).min() < 0:
                raise ValueError(f"{name} must be positive semidefinite")
            object.__setattr__(self, name, M)


@dataclass(frozen=True)
class EkfState:
    z: np.ndarray
    P: np.ndarray
    window: tuple = ()       # recent translation innovations
    stat: float = 0.0
    innovation_norm: float = 0.0
    resets: int = 0

    @property
    def quaternion(self):
        return self.z[:4]

    @property
    def offset(self):
        return self.z[4:]

    @classmethod
    def from_measurement(cls, y, cfg=EkfConfig()):
        """Start at a measurement, with that measurement's covariance."""
        y = np.asarray(y, float).copy()
        y[:4] = quat_normalize(y[:4])
        return cls(y, cfg.R_meas.copy())


def relative_twist(model, state):
    """(ω̃, ṗ̃) of a static object relative to the camera.

    ω̃ is the spatial rate of R_c^o in camera axes (= -R_0^cᵀ ω_c) and
    ṗ̃ = -ṗ_0^c is the rate of the world-axes offset."""
    _, w, p_dot = camera_motion(model, state.q, state.qdot)
    return w, p_dot


def camera_motion(model, q, qdot):
    """(camera Pose, ω̃, ṗ̃) from a single kinematic chain evaluation."""
    q = np.asarray(q, float)
    qd = np.asarray(qdot, float)
    T = K.chain(q, model.fixed)
    H = T[NDOF] @ model.tools[CAMERA]
    w_c = K.angular_jacobian(T) @ qd
    p_dot = K.point_jacobian(T, H[:3, 3].copy()) @ qd
    R = H[:3, :3]
    return Pose(R.copy(), H[:3, 3].copy()), -R.T @ w_c, -p_dot


def process_jacobians(z, u, cfg):
    """(Φ, G) of the Euler-discretized process model."""
    w, _ = u
    Ta = cfg.Ta
    Phi = np.eye(7)
    Phi[:4, :4] += 0.5 * Ta * omega_left(w)
    G = np.zeros((7, 6))
    G[:4, :3] = -0.5 * Ta * _xi_left(z[:4])
    G[4:, 3:] = Ta * np.eye(3)
    return Phi, G


def predict(state, u, cfg=EkfConfig()):
    w, p_dot = (np.asarray(a, float) for a in u)
    z = state.z
    r = z[:4] + 0.5 * cfg.Ta * omega_left(w) @ z[:4]
    d = z[4:] + cfg.Ta * p_dot
    Phi, G = process_jacobians(z, (w, p_dot), cfg)
    P = Phi @ state.P @ Phi.T + G @ cfg.Q_process @ G.T
    P = 0.5 * (P + P.T)
    return EkfState(np.concatenate([quat_normalize(r), d]), P, state.window, state.stat,
                    state.innovation_norm, state.resets)


def update(state, y, cfg=EkfConfig()):
    """Measurement update with C = I₇ in Joseph form (same P⁺ as (I - L)P⁻ for
    the optimal gain, but PSD by construction)."""
    y = np.asarray(y, float).copy()
    if y[:4] @ state.z[:4] < 0:
        y[:4] = -y[:4]
    P = state.P
    S = P + cfg.R_meas
    innov = y - state.z
    window = (state.window + (innov[4:],))[-cfg.gate_window:]
    m = np.mean(window, axis=0)
    stat = len(window) * float(m @ np.linalg.solve(S[4:, 4:], m))
    resets = state.resets
    if len(window) == cfg.gate_window and stat > cfg.gate_stat:
        # the object moved: forget the accumulated confidence
        P = cfg.P0.copy()
        S = P + cfg.R_meas
        window = ()
        resets += 1
    # gain via a solve against the SPD innovation covariance
    L = np.linalg.solve(S, P).T
    z = state.z + L @ innov
    IL = np.eye(7) - L
    P = IL @ P @ IL.T + L @ cfg.R_meas @ L.T
    P = 0.5 * (P + P.T)
    z[:4] = quat_normalize(z[:4])
    return EkfState(z, P, window, stat, float(np.linalg.norm(innov)), resets)


def world_pose(state, camera_pose):
    """Ĥ_0^o = [R_0^c R̂_c^o, p_0^c + d̂]."""
    R = camera_pose.rotation @ matrix_from_quat(state.z[:4])
    return Pose(R, camera_pose.translation + state.z[4:])


def relative_pose(state, camera_pose):
    """Ĥ_c^o with translation in camera axes."""
    return Pose(matrix_from_quat(state.z[:4]), camera_pose.rotation.T @ state.z[4:])


def measurement_of(rel, camera_pose):
    """Output vector [r_c^o, d] from a camera-frame relative pose."""
    return np.concatenate([quat_from_matrix(rel.rotation), camera_pose.rotation @ rel.translation])


def synthetic_measurement(true_object_pose, camera_pose, noise=(0.0, 0.0), rng_seed=None):
    """Noisy relative pose H_c^o as a 7-vector [quaternion, t_c^o].

    Translation noise is zero-mean Gaussian per axis in camera coordinates;
    rotation noise is a small rotation vector with per-axis std σ_r.
    ``rng_seed`` may be an int or a numpy Generator."""
    s_t, s_r = noise
    if s_t < 0 or s_r < 0:
        raise ValueError("noise levels must be nonnegative")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    rel = camera_pose.inverse() @ true_object_pose
    t = rel.translation + (rng.normal(0.0, s_t, 3) if s_t > 0 else 0.0)
    R = rel.rotation
    if s_r > 0:
        R = Rotation.from_rotvec(rng.normal(0.0, s_r, 3)).as_matrix() @ R
    return np.concatenate([quat_from_matrix(R), t])


def to_output(measurement, camera_pose):
    """Convert a camera-frame measurement [r, t_c^o] to the filter output [r, d]."""
    m = np.asarray(measurement, float)
    return np.concatenate([m[:4], camera_pose.rotation @ m[4:]])
