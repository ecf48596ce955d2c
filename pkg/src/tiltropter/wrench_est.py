"""External wrench estimation with servo-dynamics compensation.

The estimator combines a force channel driven by the measured specific force
and a momentum channel driven by the gyro:

    F_hat = K_f ∫ (m a - F - F_hat) dt
    M_hat = K_m (J ω - ∫ (M + (J ω) × ω + M_hat) dt)

Both behave as first-order low-pass filters of the true external wrench.
The integrals are advanced with the exact zero-order-hold gain
``1 - exp(-K dt)`` so the discrete step response matches the continuous
filter at every sample.

The actuator wrench ``(F, M)`` comes from measured rotor speeds and servo
angles reconstructed by a first-order model of the servos, because the
servos report no angle.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize_scalar

from .allocation import forward_wrench

FORCE_LIMIT_G = 10.0
TORQUE_LIMIT = 10.0


class ServoIdentificationError(ValueError):
    pass


def reconstruct_servo_angle(alpha_prev, alpha_cmd, dt, tau):
    if tau <= 0:
        raise ValueError("tau must be positive")
    alpha_cmd = np.asarray(alpha_cmd, float)
    return alpha_cmd + (np.asarray(alpha_prev, float) - alpha_cmd) * np.exp(-dt / tau)


@dataclass(frozen=True)
class WrenchEstimatorState:
    F_hat: np.ndarray = field(default_factory=lambda: np.zeros(3))
    M_hat: np.ndarray = field(default_factory=lambda: np.zeros(3))
    K_f: np.ndarray = field(default_factory=lambda: np.full(3, 10.0))
    K_m: np.ndarray = field(default_factory=lambda: np.full(3, 10.0))
    alpha_hat: np.ndarray = field(default_factory=lambda: np.full(4, np.pi / 2))
    force_integral: np.ndarray = field(default_factory=lambda: np.zeros(3))
    momentum_integral: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega_prev: np.ndarray = field(default_factory=lambda: np.zeros(3))
    saturated: bool = False

    def __post_init__(self):
        for name in ("K_f", "K_m"):
            k = np.asarray(getattr(self, name), float)
            k = np.diag(k) if k.ndim == 2 else np.broadcast_to(k, (3,)).copy()
            if np.any(k <= 0):
                raise ValueError(f"{name} entries must be positive")
            object.__setattr__(self, name, k)

    @property
    def wrench(self):
        return np.concatenate([self.F_hat, self.M_hat])


def initial_state(params, K_f=10.0, K_m=10.0, alpha0=None, omega0=None):
    """Estimator at rest: zero estimates with the momentum integral matched to ``J ω0``."""
    om = np.zeros(3) if omega0 is None else np.asarray(omega0, float)
    alpha = np.full(4, np.pi / 2) if alpha0 is None else np.asarray(alpha0, float)
    return WrenchEstimatorState(
        K_f=K_f, K_m=K_m, alpha_hat=alpha,
        momentum_integral=params.inertia @ om, omega_prev=om,
    )


def update(est, imu, omega_meas, alpha_cmd, dt, model, params, compensate=True):
    """One estimator step over a control period of length ``dt``.

    With ``compensate=False`` the commanded angles are taken as the actual
    angles (no servo model).
    """
    alpha_prev = est.alpha_hat
    if compensate:
        alpha_hat = reconstruct_servo_angle(alpha_prev, alpha_cmd, dt, params.tau_servo)
    else:
        alpha_prev = np.asarray(alpha_cmd, float)
        alpha_hat = alpha_prev

    # rotor speeds hold over the period; servo angles move, so average the ends
    w_start = forward_wrench(model, omega_meas, alpha=alpha_prev)
    w_end = forward_wrench(model, omega_meas, alpha=alpha_hat)
    W = 0.5 * (w_start + w_end)

    J = params.inertia
    om = np.asarray(imu.omega_meas, float)
    gain_f = (1.0 - np.exp(-est.K_f * dt)) / dt
    gain_m = (1.0 - np.exp(-est.K_m * dt)) / dt

    I_f = est.force_integral + dt * (params.mass * np.asarray(imu.a_meas) - W[:3] - est.F_hat)
    Jw_prev = J @ est.omega_prev
    I_m = est.momentum_integral + dt * (W[3:] + np.cross(Jw_prev, est.omega_prev) + est.M_hat)
    F_hat = gain_f * I_f
    M_hat = gain_m * (J @ om - I_m)

    f_lim = FORCE_LIMIT_G * params.weight
    saturated = bool(np.any(np.abs(F_hat) > f_lim) or np.any(np.abs(M_hat) > TORQUE_LIMIT))
    if saturated:
        F_hat = np.clip(F_hat, -f_lim, f_lim)
        M_hat = np.clip(M_hat, -TORQUE_LIMIT, TORQUE_LIMIT)
        # keep the integrals consistent with the clamped outputs
        I_f = F_hat / gain_f
        I_m = J @ om - M_hat / gain_m

    return replace(
        est, F_hat=F_hat, M_hat=M_hat, alpha_hat=np.asarray(alpha_hat, float),
        force_integral=I_f, momentum_integral=I_m, omega_prev=om, saturated=saturated,
    )


class WrenchEstimator:
    """Stateful convenience wrapper around :func:`update`."""

    def __init__(self, model, params, K_f=10.0, K_m=10.0, compensate=True, alpha0=None, omega0=None):
        self.model = model
        self.params = params
        self.compensate = compensate
        self._gains = (K_f, K_m)
        self.state = initial_state(params, K_f, K_m, alpha0, omega0)

    def reset(self, alpha0=None, omega0=None):
        self.state = initial_state(self.params, *self._gains, alpha0, omega0)

    def update(self, imu, omega_meas, alpha_cmd, dt):
        self.state = update(self.state, imu, omega_meas, alpha_cmd, dt, self.model,
                            self.params, self.compensate)
        return self.state


@dataclass(frozen=True)
class ServoIdDataset:
    t: np.ndarray
    command: np.ndarray
    measured: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, float)
        if t.ndim != 1 or len(t) < 20:
            raise ServoIdentificationError("need at least 20 samples")
        if np.any(np.diff(t) <= 0):
            raise ServoIdentificationError("timestamps must be strictly increasing")
        for name in ("t", "command", "measured"):
            arr = np.asarray(getattr(self, name), float)
            if arr.shape != t.shape:
                raise ServoIdentificationError(f"{name} length mismatch")
            object.__setattr__(self, name, arr)


def simulate_first_order(t, command, tau, y0):
    """Response of ``tau y' = u - y`` to a zero-order-held command sequence."""
    y = np.empty_like(command)
    y[0] = y0
    decay = np.exp(-np.diff(t) / tau)
    for k in range(1, len(t)):
        y[k] = command[k - 1] + (y[k - 1] - command[k - 1]) * decay[k - 1]
    return y


def identify_servo_tau(data, tau_bounds=(1e-3, 1.0)):
    """Least-squares fit of the servo time constant to step-response data.

    Returns ``(tau, rms_residual)``.
    """
    if np.ptp(data.command) < 1e-9:
        raise ServoIdentificationError("command has no excitation")
    lo, hi = np.log(tau_bounds[0]), np.log(tau_bounds[1])

    def sse(log_tau):
        resid = simulate_first_order(data.t, data.command, np.exp(log_tau), data.measured[0]) - data.measured
        return float(resid @ resid)

    grid = np.linspace(lo, hi, 121)
    costs = np.array([sse(g) for g in grid])
    k = int(np.argmin(costs))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    res = minimize_scalar(sse, bounds=(a, b), method="bounded", options={"xatol": 1e-10})
    log_tau = res.x if res.fun <= costs[k] else grid[k]
    tau = float(np.exp(log_tau))
    rms = float(np.sqrt(sse(log_tau) / len(data.t)))
    return tau, rms
