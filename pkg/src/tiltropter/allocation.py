"""Static tilt-rotor control allocation.

The intermediate thrust vector ``T = (T_1l, T_1v, ..., T_4l, T_4v)`` splits
each rotor's thrust into a lateral component along the horizontal tangential
direction of its arm and a vertical component along body z. In these
coordinates the wrench map ``W = A T`` does not depend on the tilt angles.

Tilt angle convention: ``alpha = atan2(T_v, T_l)``, so ``alpha = pi/2`` is a
vertical rotor and ``T_l = T cos(alpha)``, ``T_v = T sin(alpha)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import ActuatorState, Wrench

EPS_THRUST = 1e-4
PINV_RCOND = 1e-8


class SingularConfigurationError(ValueError):
    """A rotor has (near) zero thrust, so its tilt angle is undefined."""


def allocation_matrix(params):
    """6x8 matrix mapping the intermediate thrust vector to the body wrench."""
    z = np.array([0.0, 0.0, 1.0])
    kappa = 0.0 if params.neglect_drag_torque else params.c_q / params.c_t
    A = np.zeros((6, 8))
    for i, (r, a, s) in enumerate(zip(params.rotor_positions, params.arm_axes, params.spin_dirs)):
        e_t = np.cross(z, a)
        for col, d in ((2 * i, e_t), (2 * i + 1, z)):
            A[:3, col] = d
            # rotor reaction torque opposes the spin: CCW (+1) pushes the body CW
            A[3:, col] = np.cross(r, d) - s * kappa * d
    return A


@dataclass(frozen=True)
class AllocationModel:
    A: np.ndarray
    A_pinv: np.ndarray
    c_t: float
    omega_max: float

    @property
    def thrust_max(self):
        return self.c_t * self.omega_max**2


def build_allocation(params):
    A = allocation_matrix(params)
    U, s, Vt = np.linalg.svd(A)
    cutoff = PINV_RCOND * s[0]
    if s[-1] <= cutoff:
        weak = U[:, s <= cutoff].T
        names = ["Fx", "Fy", "Fz", "Mx", "My", "Mz"]
        dirs = [" + ".join(f"{c:.2f}{n}" for c, n in zip(w, names) if abs(c) > 1e-3) for w in weak]
        raise ValueError(f"allocation matrix rank-deficient along: {dirs}")
    A_pinv = (Vt[:6].T / s) @ U.T
    A.setflags(write=False)
    A_pinv.setflags(write=False)
    return AllocationModel(A=A, A_pinv=A_pinv, c_t=params.c_t, omega_max=params.omega_max)


def inverse_allocate(model, W):
    """Minimum-norm intermediate thrust ``T = A⁺ W``."""
    w = W.as_vector() if isinstance(W, Wrench) else np.asarray(W, float)
    return model.A_pinv @ w


@dataclass(frozen=True)
class ActuatorCommand:
    omega_rotor: np.ndarray
    alpha_cmd: np.ndarray
    thrust: np.ndarray
    saturated: bool


def extract_commands(T, c_t, alpha_prev=None, omega_max=None, eps_thrust=EPS_THRUST):
    """Per-rotor speed and tilt command from the intermediate thrust vector."""
    T = np.asarray(T, float).reshape(4, 2)
    T_l, T_v = T[:, 0], T[:, 1]
    thrust = np.hypot(T_l, T_v)
    alpha = np.arctan2(T_v, T_l)
    held = thrust < eps_thrust
    if np.any(held):
        prev = np.full(4, np.pi / 2) if alpha_prev is None else np.asarray(alpha_prev, float)
        alpha = np.where(held, prev, alpha)
    saturated = False
    if omega_max is not None:
        t_max = c_t * omega_max**2
        if np.any(thrust > t_max):
            saturated = True
            thrust = np.minimum(thrust, t_max)
    omega = np.sqrt(thrust / c_t)
    return ActuatorCommand(omega_rotor=omega, alpha_cmd=alpha, thrust=thrust, saturated=saturated)


def thrust_vector(omega_rotor, alpha, c_t):
    """Intermediate thrust vector produced by rotor speeds and tilt angles."""
    T = c_t * np.asarray(omega_rotor, float) ** 2
    alpha = np.asarray(alpha, float)
    return np.column_stack([T * np.cos(alpha), T * np.sin(alpha)]).reshape(8)


def forward_wrench(model, actuators, c_t=None, alpha=None):
    """Wrench produced by the rotors at the ACTUAL tilt angles.

    ``alpha`` overrides ``actuators.alpha`` (used by the estimator with
    reconstructed angles).
    """
    c_t = model.c_t if c_t is None else c_t
    if isinstance(actuators, ActuatorState):
        omega = actuators.omega_rotor
        alpha = actuators.alpha if alpha is None else alpha
    else:
        omega = actuators
    return model.A @ thrust_vector(omega, alpha, c_t)


def servo_rates_from_wrench_rate(model, W, W_dot, eps_thrust=EPS_THRUST):
    """Tilt rates implied by a wrench rate at wrench ``W``.

    With ``alpha = atan2(T_v, T_l)``:
    ``alpha_dot = (T_l dT_v - T_v dT_l) / (T_l² + T_v²)``, ``dT = A⁺ W_dot``.
    """
    T = inverse_allocate(model, W).reshape(4, 2)
    dT = inverse_allocate(model, W_dot).reshape(4, 2)
    denom = T[:, 0] ** 2 + T[:, 1] ** 2
    if np.any(np.sqrt(denom) <= eps_thrust):
        raise SingularConfigurationError("rotor thrust too small for a defined tilt rate")
    return (T[:, 0] * dT[:, 1] - T[:, 1] * dT[:, 0]) / denom


def dump_allocation_csv(model, path_prefix):
    """Write ``A`` and ``A⁺`` as CSV files ``<prefix>_A.csv`` / ``<prefix>_A_pinv.csv``."""
    paths = []
    for name, mat in (("A", model.A), ("A_pinv", model.A_pinv)):
        path = f"{path_prefix}_{name}.csv"
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in mat])
        paths.append(path)
    return paths
