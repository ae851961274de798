"""Rigid-body dynamics terms, the double-integrator model and torque-band helpers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K

NDOF = 7
_ZERO = np.zeros(NDOF)


@dataclass(frozen=True)
class DynamicsTerms:
    M: np.ndarray   # mass matrix
    C: np.ndarray   # Coriolis matrix (Christoffel symbols of the first kind)
    g: np.ndarray   # gravity torques


@dataclass(frozen=True)
class CoriolisEnvelope:
    c_lower: np.ndarray
    c_upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.c_lower, float)
        hi = np.asarray(self.c_upper, float)
        if np.any(lo > 0) or np.any(hi < 0):
            raise ValueError("envelope must satisfy c_lower <= 0 <= c_upper")
        object.__setattr__(self, "c_lower", lo)
        object.__setattr__(self, "c_upper", hi)

    @classmethod
    def zero(cls, n=NDOF):
        return cls(np.zeros(n), np.zeros(n))


def mass_matrix(model, q):
    return K.crba(np.asarray(q, float), model.fixed, model.mass, model.com, model.inertia)


def gravity_torque(model, q):
    return K.rnea(np.asarray(q, float), _ZERO, _ZERO, *model.dyn_args)


def inverse_dynamics(model, q, qdot, qddot):
    return K.rnea(np.asarray(q, float), np.asarray(qdot, float), np.asarray(qddot, float),
                  *model.dyn_args)


def coriolis_force(model, q, qdot):
    """C(q, qdot) qdot from recursive Newton-Euler (gravity removed)."""
    fixed, mass, com, inertia, _ = model.dyn_args
    return K.rnea(np.asarray(q, float), np.asarray(qdot, float), _ZERO,
                  fixed, mass, com, inertia, np.zeros(3))


def coriolis_matrix(model, q, qdot):
    dM = K.mass_matrix_derivatives(np.asarray(q, float), model.fixed, model.mass,
                                   model.com, model.inertia)
    qd = np.asarray(qdot, float)
    # dM[k, i, j] = dM_ij / dq_k
    t1 = np.einsum("kij,k->ij", dM, qd)
    t2 = np.einsum("jik,k->ij", dM, qd)
    t3 = np.einsum("ijk,k->ij", dM, qd)
    return 0.5 * (t1 + t2 - t3)


def dynamics_terms(model, state):
    return DynamicsTerms(mass_matrix(model, state.q), coriolis_matrix(model, state.q, state.qdot),
                         gravity_torque(model, state.q))


def reduced_dynamics(state, v):
    """Double-integrator state derivative [qdot; v]."""
    qdot = state.qdot if hasattr(state, "qdot") else np.asarray(state, float)[NDOF:]
    return np.concatenate([qdot, np.asarray(v, float)])


def reduced_dynamics_jacobians(n=NDOF):
    """(df/dx, df/dv) of the double integrator; independent of the operating point."""
    Gx = np.zeros((2 * n, 2 * n))
    Gx[:n, n:] = np.eye(n)
    Gv = np.zeros((2 * n, n))
    Gv[n:, :] = np.eye(n)
    return Gx, Gv


def torque_of_virtual_input(model, q, v):
    """M(q) v + g(q): joint torque needed for acceleration v at rest velocity."""
    return K.rnea(np.asarray(q, float), _ZERO, np.asarray(v, float), *model.dyn_args)


def torque_band(limits, env):
    """Admissible interval for M(q)v + g(q) after reserving the Coriolis envelope."""
    return -limits.tau_max - env.c_lower, limits.tau_max - env.c_upper


def coriolis_envelope(model, limits, samples=10_000, seed=0, inflation=0.10):
    """Componentwise bounds of C(q, qdot) qdot over uniform samples within limits."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    lo = np.zeros(NDOF)
    hi = np.zeros(NDOF)
    if np.all(limits.qdot_max == 0):
        return CoriolisEnvelope(lo, hi)
    Q = rng.uniform(-1.0, 1.0, (samples, NDOF)) * limits.q_max
    QD = rng.uniform(-1.0, 1.0, (samples, NDOF)) * limits.qdot_max
    for q, qd in zip(Q, QD):
        c = coriolis_force(model, q, qd)
        np.minimum(lo, c, out=lo)
        np.maximum(hi, c, out=hi)
    return CoriolisEnvelope((1.0 + inflation) * lo, (1.0 + inflation) * hi)


def step_plant(model, state, tau, dt):
    """RK4 step of the full rigid-body model under zero-order-hold torque."""
    from .errors import IntegrationError
    from .model import JointState

    if not (0.0 < dt <= 0.01):
        raise ValueError("dt must lie in (0, 0.01] s")
    try:
        q, qd = K.rk4_step(state.q, state.qdot, np.asarray(tau, float), dt, *model.dyn_args)
    except np.linalg.LinAlgError as e:
        raise IntegrationError(f"plant integration failed: {e}") from e
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))):
        raise IntegrationError("plant integration produced non-finite state")
    return JointState(q, qd)
