"""Kinematic primitives and the shared vehicle data model.

Conventions used everywhere in the package:

* Quaternions are scalar-first ``(w, x, y, z)`` Hamilton quaternions that
  rotate body-frame vectors into the inertial ENU frame.
* Wrenches are body-frame ``(F, M)`` pairs.
* All quantities are SI.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

GRAVITY = np.array([0.0, 0.0, -9.81])
IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])

_UNIT_TOL = 1e-6


def _check_unit(q, name="q"):
    n = np.linalg.norm(q)
    if abs(n - 1.0) > _UNIT_TOL:
        raise ValueError(f"{name} is not a unit quaternion (norm {n:.9f})")


def quat_mul(a, b):
    """Hamilton product ``a ⊗ b``."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q)


def quat_to_rotmat(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def quat_from_yaw(yaw):
    return np.array([np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)])


def quat_from_euler(roll, pitch, yaw):
    """ZYX (yaw-pitch-roll) Euler angles to quaternion."""
    qz = quat_from_axis_angle([0, 0, 1], yaw)
    qy = quat_from_axis_angle([0, 1, 0], pitch)
    qx = quat_from_axis_angle([1, 0, 0], roll)
    return quat_mul(quat_mul(qz, qy), qx)


def quat_to_euler(q):
    """Inverse of :func:`quat_from_euler`; returns ``(roll, pitch, yaw)``."""
    w, x, y, z = q
    roll = np.arctan2(2 * (w * x + y * z), 1 - 2 * (x * x + y * y))
    pitch = np.arcsin(np.clip(2 * (w * y - z * x), -1.0, 1.0))
    yaw = np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
    return np.array([roll, pitch, yaw])


def quat_exp(dtheta):
    """Unit quaternion of the rotation vector ``dtheta``."""
    dtheta = np.asarray(dtheta, dtype=float)
    angle = np.linalg.norm(dtheta)
    if angle < 1e-12:
        return quat_normalize(np.concatenate([[1.0], 0.5 * dtheta]))
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * dtheta / angle])


def quat_log(q):
    """Rotation vector of a unit quaternion (shortest rotation)."""
    q = q if q[0] >= 0 else -q
    vn = np.linalg.norm(q[1:])
    if vn < 1e-12:
        return 2.0 * q[1:]
    return 2.0 * np.arctan2(vn, q[0]) * q[1:] / vn


def quat_rotate(q, v):
    """Rotate ``v`` from the body frame into the inertial frame."""
    q = np.asarray(q, dtype=float)
    _check_unit(q)
    return quat_to_rotmat(q) @ np.asarray(v, dtype=float)


def quat_derivative(q, omega):
    """Quaternion rate ``½ q ⊗ (0, ω)`` for a body-frame angular velocity."""
    q = np.asarray(q, dtype=float)
    _check_unit(q)
    return 0.5 * quat_mul(q, np.concatenate([[0.0], omega]))


def quat_error(q, q_ref):
    """Orientation error ``q ⊗ q_ref⁻¹`` with a nonnegative scalar part."""
    q = np.asarray(q, dtype=float)
    q_ref = np.asarray(q_ref, dtype=float)
    _check_unit(q)
    _check_unit(q_ref, "q_ref")
    e = quat_mul(q, quat_conj(q_ref))
    return e if e[0] >= 0 else -e


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


@dataclass(frozen=True)
class RigidBodyState:
    """Pose and twist of the vehicle CoM.

    ``p`` and ``v`` are inertial, ``omega`` is body frame.
    """

    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for f in fields(self):
            arr = np.array(getattr(self, f.name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite {f.name}")
            arr.setflags(write=False)
            object.__setattr__(self, f.name, arr)
        object.__setattr__(self, "q", _frozen(quat_normalize(self.q)))

    def as_vector(self):
        return np.concatenate([self.p, self.v, self.q, self.omega])

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float)
        return cls(p=x[0:3], v=x[3:6], q=x[6:10], omega=x[10:13])


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Wrench:
    """Body-frame force/torque pair; also used for external wrenches and rates."""

    F: np.ndarray = field(default_factory=lambda: np.zeros(3))
    M: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("F", "M"):
            arr = np.array(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite {name}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def as_vector(self):
        return np.concatenate([self.F, self.M])

    @classmethod
    def from_vector(cls, w):
        w = np.asarray(w, dtype=float)
        return cls(F=w[:3], M=w[3:6])

    def __add__(self, other):
        return Wrench(self.F + other.F, self.M + other.M)


@dataclass(frozen=True)
class ActuatorState:
    """Rotor speeds and servo angles (actual and commanded)."""

    omega_rotor: np.ndarray = field(default_factory=lambda: np.zeros(4))
    alpha: np.ndarray = field(default_factory=lambda: np.full(4, np.pi / 2))
    alpha_cmd: np.ndarray = field(default_factory=lambda: np.full(4, np.pi / 2))

    def __post_init__(self):
        for name in ("omega_rotor", "alpha", "alpha_cmd"):
            arr = np.array(getattr(self, name), dtype=float).reshape(4)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite {name}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.omega_rotor < 0):
            raise ValueError("rotor speeds must be nonnegative")


def _default_azimuths():
    return np.deg2rad([45.0, 135.0, -135.0, -45.0])


@dataclass(frozen=True)
class VehicleParams:
    """Physical parameters of the tilt-rotor vehicle.

    Defaults other than the mass are stand-ins of plausible magnitude for a
    1.5 kg vehicle, not measured values.
    """

    mass: float = 1.5
    inertia: np.ndarray = field(default_factory=lambda: np.diag([0.012, 0.012, 0.02]))
    c_t: float = 1.2e-5
    c_q: float = 1.9e-7
    arm_length: float = 0.15
    arm_azimuths: np.ndarray = field(default_factory=_default_azimuths)
    spin_dirs: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0, -1.0, -1.0]))
    r_wheel: float = 0.12
    tau_servo: float = 0.05
    tau_rotor: float = 0.0
    omega_max: float = 2500.0
    alpha_range: tuple = (-np.pi, np.pi)
    mu_friction: float = 0.8
    neglect_drag_torque: bool = False
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def __post_init__(self):
        J = np.array(self.inertia, dtype=float)
        if J.shape == (3,):
            J = np.diag(J)
        object.__setattr__(self, "inertia", _frozen(J))
        object.__setattr__(self, "arm_azimuths", _frozen(np.asarray(self.arm_azimuths, float).reshape(4)))
        object.__setattr__(self, "spin_dirs", _frozen(np.asarray(self.spin_dirs, float).reshape(4)))
        object.__setattr__(self, "gravity", _frozen(np.asarray(self.gravity, float).reshape(3)))
        object.__setattr__(self, "alpha_range", tuple(float(a) for a in self.alpha_range))
        self.validate()

    def validate(self):
        if not (self.mass > 0 and self.c_t > 0 and self.r_wheel > 0 and self.tau_servo > 0):
            raise ValueError("mass, c_t, r_wheel and tau_servo must be positive")
        if self.c_q < 0 or self.arm_length <= 0 or self.omega_max <= 0 or self.tau_rotor < 0:
            raise ValueError("invalid rotor geometry or limits")
        J = self.inertia
        if not np.allclose(J, J.T, atol=1e-12) or np.any(np.linalg.eigvalsh(J) <= 0):
            raise ValueError("inertia must be symmetric positive-definite")
        if not set(np.abs(self.spin_dirs)) <= {1.0}:
            raise ValueError("spin_dirs must be +1/-1")
        # rank of the allocation matrix is checked by allocation.build_allocation
        from .allocation import allocation_matrix

        A = allocation_matrix(self)
        rank = np.linalg.matrix_rank(A, tol=1e-8 * np.linalg.norm(A, 2))
        if rank < 6:
            raise ValueError(f"rotor geometry gives allocation rank {rank} < 6")

    @property
    def rotor_positions(self):
        az = self.arm_azimuths
        return self.arm_length * np.stack([np.cos(az), np.sin(az), np.zeros(4)], axis=1)

    @property
    def arm_axes(self):
        az = self.arm_azimuths
        return np.stack([np.cos(az), np.sin(az), np.zeros(4)], axis=1)

    @property
    def weight(self):
        return self.mass * float(np.linalg.norm(self.gravity))

    @property
    def thrust_max(self):
        return self.c_t * self.omega_max**2

    def with_(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, np.ndarray):
                val = val.tolist()
            elif isinstance(val, tuple):
                val = list(val)
            out[f.name] = val
        out["arm_azimuths_deg"] = np.rad2deg(self.arm_azimuths).tolist()
        del out["arm_azimuths"]
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        if "arm_azimuths_deg" in data:
            data["arm_azimuths"] = np.deg2rad(np.asarray(data.pop("arm_azimuths_deg"), float))
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown vehicle keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_yaml(cls, path):
        with open(Path(path)) as fh:
            return cls.from_dict(yaml.safe_load(fh))
