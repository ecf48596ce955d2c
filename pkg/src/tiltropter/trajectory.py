"""Parametric reference trajectories sampled at the NMPC stage rate.

A figure-eight follows the Lissajous path
``p(s) = c + (A_x sin s, A_y sin 2s, z + A_z sin s)`` under a time law whose
rate ramps up and down with a quintic smoothstep. The cruise rate is set so
the peak speed equals ``v_max``; the parameterization is rejected if the
resulting acceleration exceeds ``a_max`` for every admissible ramp time.

Attitude references keep the body x-axis on the path heading. In the air the
body z-axis follows the required specific force (the vehicle tilts to
accelerate); on the ground the attitude is yaw only, which keeps the
reference velocity free of body-y components.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import math

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import minimize_scalar

from .core import GRAVITY, quat_from_yaw, quat_normalize


class PlanningError(ValueError):
    pass


@dataclass(frozen=True)
class ReferencePoint:
    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    omega: np.ndarray
    contact: bool = False
    a: np.ndarray = field(default_factory=lambda: np.zeros(3))


# --- time law -------------------------------------------------------------

def _smoothstep(tau):
    """Quintic smoothstep and its first two derivatives on [0, 1]."""
    tau = min(max(tau, 0.0), 1.0)
    s = tau * tau * tau * (10 - 15 * tau + 6 * tau * tau)
    ds = 30 * tau * tau * (1 - tau) ** 2
    dds = 60 * tau * (1 - tau) * (1 - 2 * tau)
    return s, ds, dds


class RampedTimeLaw:
    """Path parameter ``s(t)`` on ``[0, total]`` starting and ending at rest.

    The rate obeys ``s_dot = rate * sigma(t) * h(s)`` where ``sigma`` ramps
    0 -> 1 over ``ramp`` seconds with a quintic smoothstep and ``h`` is a
    speed-scaling profile in (0, 1]. The stopping ramp mirrors the starting
    one, which requires ``h(total - s) == h(s)``.
    """

    def __init__(self, total, rate, ramp, h=None):
        self.total = float(total)
        self.rate = float(rate)
        self.ramp = float(ramp)
        self.h = h if h is not None else _unit_profile
        w, T = self.rate, self.ramp

        def rhs_up(t, s):
            return [w * _smoothstep(t / T)[0] * self.h(s[0])[0]]

        up = solve_ivp(rhs_up, (0.0, T), [0.0], method="DOP853", dense_output=True,
                       rtol=1e-12, atol=1e-14)
        s_ramp = float(up.y[0, -1])
        if 2 * s_ramp > self.total:
            raise PlanningError("path too short for the requested ramp")

        def rhs_cruise(t, s):
            return [w * self.h(s[0])[0]]

        def reached(t, s):
            return s[0] - (self.total - s_ramp)
        reached.terminal = True

        horizon = 10.0 * self.total / (w * 1e-3) if w > 0 else 1.0
        cruise = solve_ivp(rhs_cruise, (T, T + horizon), [s_ramp], method="DOP853",
                           dense_output=True, rtol=1e-12, atol=1e-14, events=reached,
                           max_step=0.05)
        self._up = up.sol
        self._cruise = cruise.sol
        self.s_ramp = s_ramp
        self.t_cruise_end = float(cruise.t_events[0][0]) if len(cruise.t_events[0]) else T
        if self.total - 2 * s_ramp < 1e-12:
            self.t_cruise_end = T
        self.duration = self.t_cruise_end + T

    def _rates(self, s, sig, dsig, ddsig):
        w, T = self.rate, self.ramp
        h, dh, ddh = self.h(s)
        sd = w * sig * h
        sdd = w * (dsig / T * h + sig * dh * sd)
        sddd = w * (ddsig / T**2 * h + 2 * dsig / T * dh * sd + sig * (ddh * sd * sd + dh * sdd))
        return sd, sdd, sddd

    def __call__(self, t):
        """Return ``(s, s_dot, s_ddot, s_dddot)``."""
        T = self.ramp
        if t <= 0:
            return 0.0, 0.0, 0.0, 0.0
        if t >= self.duration:
            return self.total, 0.0, 0.0, 0.0
        if t < T:
            s = float(self._up(t)[0])
            return (s, *self._rates(s, *_smoothstep(t / T)))
        if t <= self.t_cruise_end:
            s = float(self._cruise(t)[0])
            return (s, *self._rates(s, 1.0, 0.0, 0.0))
        tau = self.duration - t
        s_up = float(self._up(tau)[0])
        sd, sdd, sddd = self._rates(s_up, *_smoothstep(tau / T))
        return self.total - s_up, sd, -sdd, sddd


def _unit_profile(s):
    return 1.0, 0.0, 0.0


# --- attitude from acceleration -------------------------------------------

def _cross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def attitude_from_accel(a, j, yaw, yaw_rate, tilt=True):
    """Quaternion and body rate aligning body z with ``a - g`` and body x with ``yaw``."""
    if not tilt:
        return quat_from_yaw(yaw), np.array([0.0, 0.0, yaw_rate])
    t = (a[0] - GRAVITY[0], a[1] - GRAVITY[1], a[2] - GRAVITY[2])
    nt = math.sqrt(_dot(t, t))
    z = tuple(c / nt for c in t)
    zj = _dot(z, j)
    zd = tuple((j[i] - z[i] * zj) / nt for i in range(3))
    cy, sy = math.cos(yaw), math.sin(yaw)
    xc = (cy, sy, 0.0)
    xcd = (-yaw_rate * sy, yaw_rate * cy, 0.0)
    w = _cross(z, xc)
    wd = tuple(u + v for u, v in zip(_cross(zd, xc), _cross(z, xcd)))
    nw = math.sqrt(_dot(w, w))
    y = tuple(c / nw for c in w)
    yw = _dot(y, wd)
    yd = tuple((wd[i] - y[i] * yw) / nw for i in range(3))
    x = _cross(y, z)
    xd = tuple(u + v for u, v in zip(_cross(yd, z), _cross(y, zd)))
    # omega = vee(R^T R_dot)
    omega = np.array([_dot(z, yd), _dot(x, zd), _dot(y, xd)])
    R = np.array([x, y, z]).T
    return _quat_from_rotmat(R), omega


def _quat_from_rotmat(R):
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(q)
    return q if q[0] >= 0 else -q


# --- trajectories ----------------------------------------------------------

class Trajectory:
    """Base class: ``evaluate(t)`` returns a :class:`ReferencePoint`."""

    duration: float = 0.0
    contact_height: float | None = None

    def evaluate(self, t):
        raise NotImplementedError

    def phase(self, t):
        return "ground" if self.evaluate(t).contact else "aerial"

    def _is_contact(self, z):
        return self.contact_height is not None and z == self.contact_height


class Hover(Trajectory):
    def __init__(self, position, yaw=0.0, duration=10.0, contact_height=None):
        self.position = np.asarray(position, float)
        self.yaw = float(yaw)
        self.duration = float(duration)
        self.contact_height = contact_height

    def evaluate(self, t):
        return ReferencePoint(
            p=self.position.copy(), v=np.zeros(3), q=quat_from_yaw(self.yaw), omega=np.zeros(3),
            contact=self._is_contact(self.position[2]),
        )


class FigureEight(Trajectory):
    """Figure-eight with smooth start and stop.

    ``ground=True`` pins the altitude to ``contact_height`` and uses a yaw-only
    attitude. ``heading='tangent'`` points body x along the path;
    ``heading='constant'`` holds ``yaw0``. With a tangent heading,
    ``yaw_rate_max`` slows the path rate in tight turns so the heading rate
    stays below that bound (the peak speed on straight parts is unchanged).
    """

    def __init__(self, center=(0.0, 0.0, 1.0), half_width=2.0, half_height=1.0, altitude=None,
                 v_max=1.5, a_max=1.5, vertical_amplitude=0.0, loops=1, ramp_time=None,
                 heading="tangent", yaw0=None, yaw_rate_max=None, ground=False,
                 contact_height=None, t0=0.0):
        if half_width <= 0 or half_height <= 0:
            raise PlanningError("figure-eight amplitudes must be positive")
        if v_max <= 0 or a_max <= 0:
            raise PlanningError("v_max and a_max must be positive")
        if heading not in ("tangent", "constant"):
            raise PlanningError(f"unknown heading policy {heading!r}")
        self.center = np.asarray(center, float)
        self.A = np.array([half_width, half_height, vertical_amplitude], float)
        self.altitude = float(self.center[2] if altitude is None else altitude)
        self.ground = ground
        self.contact_height = contact_height
        if ground:
            if contact_height is None:
                raise PlanningError("ground trajectories need the wheel radius as contact_height")
            if vertical_amplitude != 0:
                raise PlanningError("ground trajectories cannot move vertically")
            if heading != "tangent":
                raise PlanningError("ground trajectories must follow the path heading")
            self.altitude = float(contact_height)
        self.v_max = float(v_max)
        self.a_max = float(a_max)
        self.heading = heading
        self.yaw_rate_max = yaw_rate_max if heading == "tangent" else None
        self.t0 = float(t0)
        self.total = 2 * np.pi * loops

        grid = np.linspace(0.0, self.total, 8001)
        raw = np.arctan2(2 * self.A[1] * np.cos(2 * grid), self.A[0] * np.cos(grid))
        self._yaw_grid_s = grid
        self._yaw_grid = np.unwrap(raw)
        self.yaw0 = float(self._yaw_grid[0] if yaw0 is None else yaw0)
        if heading == "tangent":
            self._yaw_grid += self.yaw0 - self._yaw_grid[0]

        self.rate = self._cruise_rate(grid)
        self.law = None
        ramps = [ramp_time] if ramp_time is not None else np.arange(1.0, 20.01, 0.5)
        for ramp in ramps:
            try:
                law = RampedTimeLaw(self.total, self.rate, ramp, self._profile)
            except PlanningError:
                break
            if self._peak_accel(law) <= self.a_max:
                self.law = law
                break
        if self.law is None:
            raise PlanningError(
                f"v_max={self.v_max} and a_max={self.a_max} are infeasible for this figure-eight")
        self.duration = self.t0 + self.law.duration

    # path and derivatives w.r.t. s
    def _path(self, s):
        A = self.A
        ss, cs = math.sin(s), math.cos(s)
        s2, c2 = math.sin(2 * s), math.cos(2 * s)
        p = (self.center[0] + A[0] * ss, self.center[1] + A[1] * s2, self.altitude + A[2] * ss)
        d1 = (A[0] * cs, 2 * A[1] * c2, A[2] * cs)
        d2 = (-A[0] * ss, -4 * A[1] * s2, -A[2] * ss)
        d3 = (-A[0] * cs, -8 * A[1] * c2, -A[2] * cs)
        return p, d1, d2, d3

    def _heading_curvature(self, s):
        """d(yaw)/ds of the path tangent (vectorized)."""
        A = self.A
        x1, y1 = A[0] * np.cos(s), 2 * A[1] * np.cos(2 * s)
        x2, y2 = -A[0] * np.sin(s), -4 * A[1] * np.sin(2 * s)
        return (x1 * y2 - y1 * x2) / (x1 * x1 + y1 * y1)

    def _h0(self, s, rate):
        if self.yaw_rate_max is None:
            return np.ones_like(np.asarray(s, float))
        x = rate * np.abs(self._heading_curvature(s)) / self.yaw_rate_max
        return (1.0 + x**4) ** -0.25

    def _cruise_rate(self, grid):
        A = self.A
        speed = np.sqrt((A[0] * np.cos(grid)) ** 2 + (2 * A[1] * np.cos(2 * grid)) ** 2
                        + (A[2] * np.cos(grid)) ** 2)
        rate = self.v_max / speed.max()
        for _ in range(200):
            prof = speed * self._h0(grid, rate)
            k = int(np.argmax(prof))
            lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]

            def neg(s, rate=rate):
                d1 = self._path(s)[1]
                return -math.sqrt(_dot(d1, d1)) * float(self._h0(s, rate))
            res = minimize_scalar(neg, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
            peak = max(-res.fun, prof[k])
            new = self.v_max / peak
            if abs(new - rate) < 1e-14 * rate:
                break
            rate = new
        # the fixed point makes the peak speed equal v_max up to rounding
        return rate * (1.0 - 1e-12)

    def _profile(self, s):
        """Rate scaling ``h(s)`` and its first two derivatives."""
        if self.yaw_rate_max is None:
            return 1.0, 0.0, 0.0
        e1, e2 = 1e-5, 1e-4
        h = float(self._h0(s, self.rate))
        hp, hm = float(self._h0(s + e1, self.rate)), float(self._h0(s - e1, self.rate))
        hp2, hm2 = float(self._h0(s + e2, self.rate)), float(self._h0(s - e2, self.rate))
        return h, (hp - hm) / (2 * e1), (hp2 - 2 * h + hm2) / (e2 * e2)

    def _peak_accel(self, law):
        ts = np.linspace(0, law.duration, int(law.duration * 200) + 2)
        peak = 0.0
        for t in ts:
            s, sd, sdd, _ = law(t)
            _, d1, d2, _ = self._path(s)
            acc = [d2[i] * sd * sd + d1[i] * sdd for i in range(3)]
            peak = max(peak, math.sqrt(_dot(acc, acc)))
        return peak

    def _yaw(self, s, sd):
        if self.heading != "tangent":
            return self.yaw0, 0.0
        _, d1, d2, _ = self._path(s)
        raw = math.atan2(d1[1], d1[0])
        approx = float(np.interp(s, self._yaw_grid_s, self._yaw_grid))
        yaw = raw + 2 * math.pi * round((approx - raw) / (2 * math.pi))
        dyaw_ds = (d1[0] * d2[1] - d1[1] * d2[0]) / (d1[0] ** 2 + d1[1] ** 2)
        return yaw, dyaw_ds * sd

    def evaluate(self, t):
        s, sd, sdd, sddd = self.law(t - self.t0)
        p, d1, d2, d3 = self._path(s)
        v = np.array([d1[i] * sd for i in range(3)])
        a = np.array([d2[i] * sd * sd + d1[i] * sdd for i in range(3)])
        j = np.array([d3[i] * sd**3 + 3 * d2[i] * sd * sdd + d1[i] * sddd for i in range(3)])
        yaw, yaw_rate = self._yaw(s, sd)
        q, omega = attitude_from_accel(a, j, yaw, yaw_rate, tilt=not self.ground)
        return ReferencePoint(p=np.array(p), v=v, q=q, omega=omega,
                              contact=self._is_contact(p[2]), a=a)

    @property
    def end_yaw(self):
        return self._yaw(self.total, 0.0)[0]

    @property
    def start_yaw(self):
        return self._yaw(0.0, 0.0)[0]

    @property
    def end_point(self):
        return self.evaluate(self.duration)


def _quintic(tau):
    tau = min(max(tau, 0.0), 1.0)
    return (tau**3 * (10 - 15 * tau + 6 * tau**2),
            30 * tau**2 * (1 - tau) ** 2,
            60 * tau * (1 - tau) * (1 - 2 * tau))


class HybridMission(Trajectory):
    """Aerial figure-eight, smooth vertical descent to the wheels, ground figure-eight.

    The descent blends altitude (and yaw, if the two segments' headings
    differ) with a quintic, so altitude is C² and touches down with zero
    vertical speed. Dwell periods hold the hover before the descent and the
    resting pose after touchdown.

    The default 6 s descent keeps the peak vertical jerk from a 1.5 m hover
    below what a 2 N/s thrust-rate limit can follow on a 1.5 kg vehicle.
    """

    def __init__(self, aerial: FigureEight, ground: FigureEight, transition_duration=6.0,
                 dwell_before=1.0, dwell_after=1.0):
        if transition_duration < 1.0:
            raise PlanningError("transition_duration must be at least 1 s")
        if not ground.ground or aerial.ground:
            raise PlanningError("hybrid mission needs an aerial then a ground figure-eight")
        end = aerial.end_point
        start = ground.evaluate(ground.t0)
        if np.linalg.norm(end.p[:2] - start.p[:2]) > 1e-9:
            raise PlanningError("ground segment does not start below the aerial end point")
        if end.p[2] <= ground.contact_height:
            raise PlanningError("aerial segment must end above the ground")
        self.aerial = aerial
        self.ground_seg = ground
        self.contact_height = ground.contact_height
        self.t_descent = aerial.duration + dwell_before
        self.t_touchdown = self.t_descent + transition_duration
        self.t_ground = self.t_touchdown + dwell_after
        self.transition_duration = transition_duration
        self._z_air = end.p[2]
        self._xy = end.p[:2].copy()
        self._yaw_air = aerial.end_yaw
        yaw_ground = ground.start_yaw
        self._dyaw = (yaw_ground - self._yaw_air + np.pi) % (2 * np.pi) - np.pi
        self.duration = self.t_ground + (ground.duration - ground.t0)

    def evaluate(self, t):
        if t <= self.aerial.duration:
            return self.aerial.evaluate(t)
        if t >= self.t_ground:
            ref = self.ground_seg.evaluate(self.ground_seg.t0 + (t - self.t_ground))
            return ref
        h = self.contact_height
        if t >= self.t_touchdown:
            z, vz, az = h, 0.0, 0.0
            yaw, yaw_rate = self._yaw_air + self._dyaw, 0.0
        else:
            T = self.transition_duration
            sig, dsig, ddsig = _quintic((t - self.t_descent) / T)
            z = self._z_air + (h - self._z_air) * sig
            vz = (h - self._z_air) * dsig / T
            az = (h - self._z_air) * ddsig / T**2
            yaw = self._yaw_air + self._dyaw * sig
            yaw_rate = self._dyaw * dsig / T
        p = np.array([self._xy[0], self._xy[1], z])
        q = quat_from_yaw(yaw)
        return ReferencePoint(p=p, v=np.array([0.0, 0.0, vz]), q=q,
                              omega=np.array([0.0, 0.0, yaw_rate]),
                              contact=self._is_contact(z), a=np.array([0.0, 0.0, az]))

    def phase(self, t):
        if t <= self.aerial.duration or (t < self.t_descent):
            return "aerial"
        if t < self.t_touchdown:
            return "transition"
        return "ground"


def sample_horizon(traj, t, N, dt):
    """``N + 1`` stage-aligned reference points; times past the end hold the final point."""
    end = traj.duration
    return [traj.evaluate(min(t + k * dt, end)) for k in range(N + 1)]


def from_config(spec, r_wheel):
    """Build a trajectory from a scenario ``trajectory`` mapping."""
    spec = dict(spec)
    kind = spec.pop("type")
    if kind == "hover":
        pos = spec.get("position", [0.0, 0.0, 1.0])
        return Hover(pos, yaw=spec.get("yaw", 0.0), duration=spec.get("duration", 10.0),
                     contact_height=r_wheel)
    if kind == "figure_eight":
        ground = spec.pop("ground", False)
        return FigureEight(ground=ground, contact_height=r_wheel, **spec)
    if kind == "hybrid":
        aerial = FigureEight(contact_height=r_wheel, **spec.pop("aerial"))
        ground = FigureEight(ground=True, contact_height=r_wheel, **spec.pop("ground"))
        return HybridMission(aerial, ground, **spec)
    raise PlanningError(f"unknown trajectory type {kind!r}")
