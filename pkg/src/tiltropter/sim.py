"""Fixed-step plant simulator.

Rigid-body dynamics driven by the rotor wrench at the actual servo angles,
first-order servo (and optional rotor) lag, a flat-ground wheel contact
enforced by Baumgarte-stabilized constraint forces, and an IMU model.

The two wheels share an axle along body y through the CoM, so while rolling
the contact enforces ``p_z = r_wheel``, zero body-y velocity and zero roll
rate; pitch and yaw remain free.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .allocation import build_allocation, forward_wrench
from .core import (
    ActuatorState,
    RigidBodyState,
    Wrench,
    quat_mul,
    quat_to_rotmat,
)


class SimulationDiverged(RuntimeError):
    def __init__(self, message, last_state):
        super().__init__(message)
        self.last_state = last_state


@dataclass(frozen=True)
class ContactConfig:
    tol: float = 1e-3
    k_p: float = 400.0
    k_d: float = 40.0


@dataclass(frozen=True)
class ImuNoise:
    sigma_accel: float = 0.05
    sigma_gyro: float = 0.005
    enabled: bool = True


@dataclass(frozen=True)
class ImuSample:
    a_meas: np.ndarray
    omega_meas: np.ndarray
    timestamp: float


@dataclass(frozen=True)
class PlantState:
    body: RigidBodyState = field(default_factory=RigidBodyState)
    actuators: ActuatorState = field(default_factory=ActuatorState)
    contact_active: bool = False
    ground_reaction: Wrench = field(default_factory=Wrench)
    disturbance: Wrench = field(default_factory=Wrench)
    applied: Wrench = field(default_factory=Wrench)
    time: float = 0.0


def dynamics_derivative(state, W, W_ext, params):
    """Time derivative ``(p_dot, v_dot, q_dot, omega_dot)`` as a 13-vector."""
    if isinstance(state, RigidBodyState):
        state = state.as_vector()
    w = W.as_vector() if isinstance(W, Wrench) else np.asarray(W, float)
    we = W_ext.as_vector() if isinstance(W_ext, Wrench) else np.asarray(W_ext, float)
    return _rigid_body_rhs(state, w + we, params.mass, params.inertia, params.gravity)


def _rigid_body_rhs(x, wrench, mass, J, g, J_inv=None):
    v = x[3:6]
    q = x[6:10]
    om = x[10:13]
    R = quat_to_rotmat(q)
    dv = R @ wrench[:3] / mass + g
    dq = 0.5 * quat_mul(q, np.array([0.0, om[0], om[1], om[2]]))
    Jinv = np.linalg.inv(J) if J_inv is None else J_inv
    dom = Jinv @ (wrench[3:] - np.cross(om, J @ om))
    return np.concatenate([v, dv, dq, dom])


def constraint_reaction(x, wrench, params, contact=ContactConfig(), clamp=True):
    """Ground reaction (body-frame 6-vector) and normal force for a rolling state.

    ``wrench`` is the total non-contact body wrench (actuators plus
    disturbances). The reaction makes the vertical acceleration, body-y
    acceleration and roll acceleration follow Baumgarte targets. With
    ``clamp`` the normal force is kept nonnegative and the lateral force is
    limited by Coulomb friction.
    """
    m = params.mass
    J = params.inertia
    p, v, q, om = x[0:3], x[3:6], x[6:10], x[10:13]
    R = quat_to_rotmat(q)
    a0 = R @ wrench[:3] / m + params.gravity
    Jinv = np.linalg.inv(J)
    domega0 = Jinv @ (wrench[3:] - np.cross(om, J @ om))

    e_y = R[:, 1]
    e_y_dot = R @ np.cross(om, [0.0, 1.0, 0.0])
    v_by = e_y @ v
    az_target = -contact.k_p * (p[2] - params.r_wheel) - contact.k_d * v[2]
    ay_target = -contact.k_d * v_by - e_y_dot @ v
    c = e_y[2]
    rhs = m * np.array([az_target - a0[2], ay_target - e_y @ a0])
    det = 1.0 - c * c
    normal = (rhs[0] - c * rhs[1]) / det
    lateral = (rhs[1] - c * rhs[0]) / det
    if clamp:
        normal = max(normal, 0.0)
        limit = params.mu_friction * normal
        if abs(lateral) > limit:
            lateral = float(np.clip(lateral, -limit, limit))
            normal = max(rhs[0] - c * lateral, 0.0)
    tau_x = (-contact.k_d * om[0] - domega0[0]) / Jinv[0, 0]
    F_body = R.T @ np.array([0.0, 0.0, normal]) + lateral * np.array([0.0, 1.0, 0.0])
    return np.concatenate([F_body, [tau_x, 0.0, 0.0]]), normal


def resolve_contact(body, W_applied, params, contact=ContactConfig(), was_active=False):
    """Ground reaction wrench and contact flag for the current state.

    Contact engages when the wheels reach the ground while not moving up, and
    releases instead of pulling the vehicle down (no adhesion).
    """
    x = body.as_vector() if isinstance(body, RigidBodyState) else np.asarray(body, float)
    w = W_applied.as_vector() if isinstance(W_applied, Wrench) else np.asarray(W_applied, float)
    near = x[2] <= params.r_wheel + contact.tol
    if not near or (not was_active and x[5] > 0.0):
        return Wrench(), False
    _, normal = constraint_reaction(x, w, params, contact, clamp=False)
    if normal < 0.0:
        return Wrench(), False
    reaction, _ = constraint_reaction(x, w, params, contact, clamp=True)
    return Wrench.from_vector(reaction), True


def _plant_rhs(x, wrench, params, J_inv, in_contact, contact):
    total = wrench
    if in_contact:
        reaction, _ = constraint_reaction(x, wrench, params, contact, clamp=True)
        total = wrench + reaction
    return _rigid_body_rhs(x, total, params.mass, params.inertia, params.gravity, J_inv)


def step(plant, commands, dt, params, model=None, disturbance=None, contact=ContactConfig()):
    """Advance the plant by ``dt`` under zero-order-held actuator commands.

    ``commands`` is any object with ``omega_rotor`` and ``alpha_cmd``.
    ``disturbance`` is an extra body-frame external wrench (or callable of
    time returning one).
    """
    if not 0.0 < dt <= 0.01:
        raise ValueError("dt must lie in (0, 0.01] s")
    model = build_allocation(params) if model is None else model
    act = plant.actuators
    lo, hi = params.alpha_range
    alpha_cmd = np.clip(np.asarray(commands.alpha_cmd, float), lo, hi)
    omega_cmd = np.clip(np.asarray(commands.omega_rotor, float), 0.0, params.omega_max)

    decay = np.exp(-dt / params.tau_servo)
    alpha = alpha_cmd + (act.alpha - alpha_cmd) * decay
    if params.tau_rotor > 0:
        omega = omega_cmd + (act.omega_rotor - omega_cmd) * np.exp(-dt / params.tau_rotor)
    else:
        omega = omega_cmd
    actuators = ActuatorState(omega_rotor=omega, alpha=alpha, alpha_cmd=alpha_cmd)
    W_act = forward_wrench(model, actuators)

    dist = disturbance(plant.time) if callable(disturbance) else disturbance
    W_dist = np.zeros(6) if dist is None else (
        dist.as_vector() if isinstance(dist, Wrench) else np.asarray(dist, float))
    W_total = W_act + W_dist

    x = plant.body.as_vector()
    reaction, active = resolve_contact(x, W_total, params, contact, plant.contact_active)

    J_inv = np.linalg.inv(params.inertia)
    k1 = _plant_rhs(x, W_total, params, J_inv, active, contact)
    k2 = _plant_rhs(x + 0.5 * dt * k1, W_total, params, J_inv, active, contact)
    k3 = _plant_rhs(x + 0.5 * dt * k2, W_total, params, J_inv, active, contact)
    k4 = _plant_rhs(x + dt * k3, W_total, params, J_inv, active, contact)
    x_new = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(x_new)):
        raise SimulationDiverged(f"non-finite state at t={plant.time + dt:.4f}", plant)
    x_new[6:10] /= np.linalg.norm(x_new[6:10])

    return PlantState(
        body=RigidBodyState.from_vector(x_new),
        actuators=actuators,
        contact_active=active,
        ground_reaction=reaction,
        disturbance=Wrench.from_vector(W_dist),
        applied=Wrench.from_vector(W_act),
        time=plant.time + dt,
    )


def sample_imu(prev, curr, dt, noise=ImuNoise(), rng=None, gravity=None, timestamp=0.0):
    """Accelerometer and gyro sample from two consecutive body states.

    The accelerometer reports specific force ``q⁻¹ ⊙ (v_dot - g)`` so that an
    unperturbed vehicle in free flight measures exactly its actuator force
    divided by mass.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    g = np.array([0.0, 0.0, -9.81]) if gravity is None else np.asarray(gravity, float)
    v_dot = (curr.v - prev.v) / dt
    a = quat_to_rotmat(curr.q).T @ (v_dot - g)
    om = np.array(curr.omega, dtype=float)
    if noise.enabled and rng is not None:
        a = a + rng.normal(0.0, noise.sigma_accel, 3)
        om = om + rng.normal(0.0, noise.sigma_gyro, 3)
    return ImuSample(a_meas=a, omega_meas=om, timestamp=timestamp)


def mechanical_energy(body, params):
    J = params.inertia
    return (0.5 * params.mass * body.v @ body.v
            + 0.5 * body.omega @ J @ body.omega
            - params.mass * params.gravity @ body.p)


class Simulator:
    """Single-owner stepped wrapper around :func:`step`."""

    def __init__(self, params, initial=None, dt=1e-3, contact=ContactConfig(), disturbance=None):
        self.params = params
        self.model = build_allocation(params)
        self.dt = dt
        self.contact = contact
        self.disturbance = disturbance
        self.state = initial if initial is not None else PlantState()

    def step(self, commands):
        self.state = step(self.state, commands, self.dt, self.params, self.model,
                          self.disturbance, self.contact)
        return self.state

    def advance(self, commands, duration):
        n = int(round(duration / self.dt))
        for _ in range(n):
            self.step(commands)
        return self.state

    def with_state(self, **changes):
        self.state = replace(self.state, **changes)
        return self.state
