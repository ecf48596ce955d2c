"""Closed-loop scenario runner and run metrics.

One control tick: sample the reference horizon, solve the NMPC, allocate the
wrench command to rotor speeds and tilt angles, advance the plant at the
simulation rate, then update the wrench estimator from the IMU and rotor
telemetry. The estimate (or the true contact/disturbance wrench when the
estimator is disabled) feeds the next NMPC prediction.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import yaml

from .allocation import (
    EPS_THRUST,
    build_allocation,
    extract_commands,
    inverse_allocate,
)
from .core import ActuatorState, RigidBodyState, VehicleParams, quat_from_axis_angle, quat_mul, quat_to_rotmat
from .nmpc import RELAXED, NmpcConfig, NmpcController, SolverError
from .sim import ContactConfig, ImuNoise, PlantState, SimulationDiverged, sample_imu, step
from .trajectory import from_config, sample_horizon
from .wrench_est import WrenchEstimator

log = logging.getLogger(__name__)


# --- power proxy -------------------------------------------------------------

@dataclass(frozen=True)
class PowerModel:
    p_hover: float = 650.0
    p_base: float = 8.0
    rho: float = 1.225
    rotor_radius: float = 0.0635

    @property
    def disk_area(self):
        return math.pi * self.rotor_radius**2

    def induced(self, thrust):
        thrust = np.clip(np.asarray(thrust, float), 0.0, None)
        return float(np.sum(thrust**1.5)) / math.sqrt(2.0 * self.rho * self.disk_area)

    def kappa(self, params):
        hover = self.induced(np.full(4, params.weight / 4.0))
        return (self.p_hover - self.p_base) / hover


def power_proxy(actuators, params, model=PowerModel()):
    """Momentum-theory power estimate calibrated so hover draws ``p_hover``."""
    omega = actuators.omega_rotor if isinstance(actuators, ActuatorState) else np.asarray(actuators)
    thrust = params.c_t * np.asarray(omega, float) ** 2
    return model.kappa(params) * model.induced(thrust) + model.p_base


def implied_servo_rates(model, W, W_dot, min_thrust=0.1):
    """Tilt rates implied by ``(W, W_dot)``; rotors below ``min_thrust`` are NaN."""
    T = inverse_allocate(model, W).reshape(4, 2)
    dT = inverse_allocate(model, W_dot).reshape(4, 2)
    denom = T[:, 0] ** 2 + T[:, 1] ** 2
    rates = np.full(4, np.nan)
    ok = np.sqrt(denom) > max(min_thrust, EPS_THRUST)
    rates[ok] = (T[ok, 0] * dT[ok, 1] - T[ok, 1] * dT[ok, 0]) / denom[ok]
    return rates


# --- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class NoiseConfig:
    imu: bool = True
    state: bool = True
    rotor: bool = True
    sigma_accel: float = 0.05
    sigma_gyro: float = 0.005
    sigma_pos: float = 0.002
    sigma_vel: float = 0.005
    sigma_att: float = 0.002
    sigma_rotor_rel: float = 0.005

    def off(self):
        return replace(self, imu=False, state=False, rotor=False)


@dataclass(frozen=True)
class EstimatorConfig:
    enabled: bool = True
    K_f: float = 10.0
    K_m: float = 10.0
    compensate: bool = True


@dataclass(frozen=True)
class Disturbance:
    """Constant body-frame wrench applied on ``[t_start, t_end)``."""
    wrench: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    t_start: float = 0.0
    t_end: float = math.inf

    def at(self, t):
        return np.asarray(self.wrench, float) if self.t_start <= t < self.t_end else np.zeros(6)


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    nmpc: NmpcConfig = field(default_factory=NmpcConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    trajectory: dict = field(default_factory=lambda: {"type": "hover", "position": [0, 0, 1]})
    dt_sim: float = 0.001
    dt_ctrl: float = 0.01
    duration: float | None = None
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    disturbances: tuple = ()
    seed: int = 0
    out_dir: str | None = None
    residual_settle: float = 0.5
    idle_thrust: float = 0.2  # fraction of weight commanded at a grounded start
    power: PowerModel = field(default_factory=PowerModel)

    def __post_init__(self):
        ratio = self.dt_ctrl / self.dt_sim
        if self.dt_sim <= 0 or abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("dt_ctrl must be an integer multiple of dt_sim")

    @property
    def substeps(self):
        return int(round(self.dt_ctrl / self.dt_sim))

    @classmethod
    def from_dict(cls, data, base_dir="."):
        data = dict(data)
        veh = data.pop("vehicle", None)
        if isinstance(veh, str):
            path = veh if os.path.isabs(veh) else os.path.join(base_dir, veh)
            vehicle = VehicleParams.from_yaml(path)
        elif isinstance(veh, dict):
            vehicle = VehicleParams.from_dict(veh)
        else:
            vehicle = VehicleParams()
        kw = {"vehicle": vehicle}
        if "nmpc" in data:
            kw["nmpc"] = NmpcConfig.from_dict(data.pop("nmpc") or {})
        if "estimator" in data:
            kw["estimator"] = EstimatorConfig(**(data.pop("estimator") or {}))
        if "noise" in data:
            kw["noise"] = NoiseConfig(**(data.pop("noise") or {}))
        if "power" in data:
            kw["power"] = PowerModel(**(data.pop("power") or {}))
        if "disturbances" in data:
            kw["disturbances"] = tuple(
                Disturbance(wrench=tuple(d["wrench"]), t_start=d.get("t_start", 0.0),
                            t_end=d.get("t_end", math.inf))
                for d in data.pop("disturbances") or [])
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        kw.update(data)
        return cls(**kw)

    @classmethod
    def from_yaml(cls, path):
        with open(path) as fh:
            data = yaml.safe_load(fh)
        return cls.from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))


# --- metrics -------------------------------------------------------------------

@dataclass
class RunMetrics:
    rmse_position: float
    rmse_per_phase: dict
    mean_power_aerial: float
    mean_power_ground: float
    power_ratio: float
    max_ground_vby: float
    max_ground_omega_x: float
    max_ground_height_error: float
    mean_ground_fz_cmd: float
    max_servo_rate: float
    contact_events: int
    solve_time_mean: float
    solve_time_max: float
    iterations_mean: float
    relaxed_solves: int
    estimator_force_rmse: float
    estimator_torque_rmse: float
    duration: float
    samples: int
    failed: bool = False
    error: str = ""

    @classmethod
    def empty(cls):
        """Placeholder for a run that failed before logging anything."""
        kw = {}
        for f in fields(cls):
            if f.name == "rmse_per_phase":
                kw[f.name] = {}
            elif f.type in ("int", int):
                kw[f.name] = 0
            elif f.name not in ("failed", "error"):
                kw[f.name] = float("nan")
        return cls(**kw)

    def to_dict(self, timing=True):
        """Plain-type mapping; ``timing=False`` drops the wall-clock fields,
        which are the only ones that differ between identical seeded runs."""
        out = {}
        for k, v in asdict(self).items():
            if not timing and k in TIMING_FIELDS:
                continue
            if isinstance(v, dict):
                out[k] = {kk: _plain(vv) for kk, vv in v.items()}
            else:
                out[k] = _plain(v)
        return out


TIMING_FIELDS = ("solve_time_mean", "solve_time_max")


def _plain(v):
    if isinstance(v, (bool, str, int)) or v is None:
        return v
    v = float(v)
    return None if math.isnan(v) else v


# log columns, one row per control tick
LOG_COLUMNS = (
    ["t", "phase", "ref_contact"]
    + [f"p_{a}" for a in "xyz"] + [f"v_{a}" for a in "xyz"] + [f"q_{a}" for a in "wxyz"]
    + [f"omega_{a}" for a in "xyz"]
    + [f"p_ref_{a}" for a in "xyz"] + [f"v_ref_{a}" for a in "xyz"]
    + [f"rotor_{i}" for i in range(1, 5)] + [f"alpha_{i}" for i in range(1, 5)]
    + [f"alpha_cmd_{i}" for i in range(1, 5)] + [f"alpha_hat_{i}" for i in range(1, 5)]
    + [f"W_cmd_{c}" for c in ("Fx", "Fy", "Fz", "Mx", "My", "Mz")]
    + [f"u0_{c}" for c in ("Fx", "Fy", "Fz", "Mx", "My", "Mz")]
    + [f"W_applied_{c}" for c in ("Fx", "Fy", "Fz", "Mx", "My", "Mz")]
    + [f"W_true_ext_{c}" for c in ("Fx", "Fy", "Fz", "Mx", "My", "Mz")]
    + [f"W_hat_{c}" for c in ("Fx", "Fy", "Fz", "Mx", "My", "Mz")]
    + ["contact", "v_by", "power", "servo_rate_max", "kkt_residual", "iterations", "status",
       "delta_stages", "solve_time"]
)


def compute_metrics(logs, r_wheel=None, settle=0.5):
    """Metrics from a list of per-tick log dicts (see ``LOG_COLUMNS``)."""
    if not logs:
        raise ValueError("empty log")
    get = lambda *cols: np.array([[row[c] for c in cols] for row in logs], float)
    t = get("t")[:, 0]
    err = get("p_x", "p_y", "p_z") - get("p_ref_x", "p_ref_y", "p_ref_z")
    sq = np.sum(err * err, axis=1)
    rmse = float(np.sqrt(np.mean(sq)))
    phases = np.array([row.get("phase", "aerial") for row in logs])
    per_phase = {ph: float(np.sqrt(np.mean(sq[phases == ph]))) for ph in ("aerial", "transition", "ground")
                 if np.any(phases == ph)}

    def col(name, default=np.nan):
        if name in logs[0]:
            return get(name)[:, 0]
        return np.full(len(logs), default)

    power = col("power")
    aerial = phases == "aerial"
    ground = phases == "ground"
    p_air = float(np.mean(power[aerial])) if np.any(aerial) else float("nan")
    p_gnd = float(np.mean(power[ground])) if np.any(ground) else float("nan")
    ratio = p_gnd / p_air if np.any(aerial) and np.any(ground) else float("nan")

    # constraint residuals after the ground phase has settled
    g_idx = np.flatnonzero(ground)
    resid = (float("nan"),) * 3
    fz = float("nan")
    if len(g_idx):
        starts = g_idx[np.r_[True, np.diff(g_idx) > 1]]
        mask = np.zeros(len(logs), dtype=bool)
        for s in starts:
            stop = s
            while stop + 1 < len(logs) and ground[stop + 1]:
                stop += 1
            mask[s: stop + 1] = t[s: stop + 1] >= t[s] + settle
        if np.any(mask):
            r = r_wheel if r_wheel is not None else float(np.median(col("p_z")[mask]))
            resid = (float(np.max(np.abs(col("v_by")[mask]))),
                     float(np.max(np.abs(col("omega_x")[mask]))),
                     float(np.max(np.abs(col("p_z")[mask] - r))))
        fz = float(np.mean(col("W_cmd_Fz")[ground]))

    contact = col("contact", 0.0)
    events = int(np.sum(np.abs(np.diff(contact)) > 0.5))
    solve = col("solve_time", 0.0)
    iters = col("iterations", 0.0)
    relaxed = int(sum(1 for row in logs if row.get("status") == RELAXED))
    servo = col("servo_rate_max", 0.0)
    servo_max = float(np.nanmax(servo)) if np.any(np.isfinite(servo)) else 0.0

    try:
        f_err = get(*[f"W_hat_{c}" for c in ("Fx", "Fy", "Fz")]) - get(*[f"W_true_ext_{c}" for c in ("Fx", "Fy", "Fz")])
        m_err = get(*[f"W_hat_{c}" for c in ("Mx", "My", "Mz")]) - get(*[f"W_true_ext_{c}" for c in ("Mx", "My", "Mz")])
        f_rmse = float(np.sqrt(np.mean(np.sum(f_err**2, axis=1))))
        m_rmse = float(np.sqrt(np.mean(np.sum(m_err**2, axis=1))))
    except KeyError:
        f_rmse = m_rmse = float("nan")

    return RunMetrics(
        rmse_position=rmse, rmse_per_phase=per_phase,
        mean_power_aerial=p_air, mean_power_ground=p_gnd, power_ratio=ratio,
        max_ground_vby=resid[0], max_ground_omega_x=resid[1], max_ground_height_error=resid[2],
        mean_ground_fz_cmd=fz, max_servo_rate=servo_max, contact_events=events,
        solve_time_mean=float(np.mean(solve)), solve_time_max=float(np.max(solve)),
        iterations_mean=float(np.mean(iters)), relaxed_solves=relaxed,
        estimator_force_rmse=f_rmse, estimator_torque_rmse=m_rmse,
        duration=float(t[-1] - t[0]), samples=len(logs),
    )


# --- runner ---------------------------------------------------------------------

@dataclass
class RunResult:
    metrics: RunMetrics
    logs: list
    trajectory: object


def _initial_plant(traj, params, model, idle_thrust=0.0):
    ref = traj.evaluate(0.0)
    grounded = bool(ref.contact)
    if grounded:
        # rotors spun up to idle so the tilt servos start with usable thrust
        W0 = np.array([0.0, 0.0, idle_thrust * params.weight, 0.0, 0.0, 0.0])
    else:
        # thrust that matches the reference acceleration at the start
        R = quat_to_rotmat(ref.q)
        W0 = np.r_[R.T @ (params.mass * (ref.a - params.gravity)), np.zeros(3)]
    cmd = extract_commands(inverse_allocate(model, W0), params.c_t, omega_max=params.omega_max)
    body = RigidBodyState(p=ref.p, v=ref.v, q=ref.q, omega=ref.omega)
    act = ActuatorState(omega_rotor=cmd.omega_rotor, alpha=cmd.alpha_cmd, alpha_cmd=cmd.alpha_cmd)
    plant = PlantState(body=body, actuators=act, contact_active=grounded)
    return plant, W0, cmd


def _noisy_state(body, W, noise, rng):
    p, v, q, om = body.p, body.v, body.q, body.omega
    if noise.state:
        p = p + rng.normal(0.0, noise.sigma_pos, 3)
        v = v + rng.normal(0.0, noise.sigma_vel, 3)
        ang = rng.normal(0.0, noise.sigma_att, 3)
        n = np.linalg.norm(ang)
        if n > 0:
            q = quat_mul(q, quat_from_axis_angle(ang / n, n))
        q = q / np.linalg.norm(q)
    if noise.imu:
        om = om + rng.normal(0.0, noise.sigma_gyro, 3)
    return np.concatenate([W, p, v, q, om])


def run_scenario(cfg: ScenarioConfig, write_logs=True):
    """Run a closed-loop scenario and return a :class:`RunResult`."""
    params = cfg.vehicle
    model = build_allocation(params)
    traj = from_config(cfg.trajectory, params.r_wheel)
    duration = traj.duration if cfg.duration is None else cfg.duration
    rng = np.random.default_rng(cfg.seed)
    noise = cfg.noise
    imu_noise = ImuNoise(noise.sigma_accel, noise.sigma_gyro, noise.imu)
    contact = ContactConfig()

    plant, W_cmd, cmd = _initial_plant(traj, params, model, cfg.idle_thrust)
    controller = NmpcController(cfg.nmpc, params, cfg.dt_ctrl)
    est = WrenchEstimator(model, params, cfg.estimator.K_f, cfg.estimator.K_m,
                          cfg.estimator.compensate, alpha0=plant.actuators.alpha,
                          omega0=plant.body.omega)
    alpha_cmd = cmd.alpha_cmd
    true_ext = np.zeros(6)
    logs = []
    failure = ""
    n_ticks = int(math.floor(duration / cfg.dt_ctrl + 1e-9)) + 1

    def disturbance(t):
        total = np.zeros(6)
        for d in cfg.disturbances:
            total = total + d.at(t)
        return total

    for i in range(n_ticks):
        t = i * cfg.dt_ctrl
        x_est = _noisy_state(plant.body, W_cmd, noise, rng)
        ext = est.state.wrench if cfg.estimator.enabled else true_ext
        refs = sample_horizon(traj, t, cfg.nmpc.N, cfg.nmpc.dt)
        try:
            W_new, sol = controller.step(t, x_est, refs, ext)
        except (SolverError, ValueError) as exc:
            failure = f"solver failure at t={t:.2f}: {exc}"
            break
        servo = implied_servo_rates(model, W_new, sol.u0)
        W_cmd = W_new
        cmd = extract_commands(inverse_allocate(model, W_cmd), params.c_t, alpha_prev=alpha_cmd,
                               omega_max=params.omega_max)
        alpha_cmd = cmd.alpha_cmd

        ref = refs[0]
        body = plant.body
        R = quat_to_rotmat(body.q)
        row = {
            "t": t, "phase": traj.phase(t), "ref_contact": int(ref.contact),
            **dict(zip(LOG_COLUMNS[3:6], body.p)), **dict(zip(LOG_COLUMNS[6:9], body.v)),
            **dict(zip(LOG_COLUMNS[9:13], body.q)), **dict(zip(LOG_COLUMNS[13:16], body.omega)),
            **dict(zip(LOG_COLUMNS[16:19], ref.p)), **dict(zip(LOG_COLUMNS[19:22], ref.v)),
        }
        row.update(zip([f"rotor_{k}" for k in range(1, 5)], plant.actuators.omega_rotor))
        row.update(zip([f"alpha_{k}" for k in range(1, 5)], plant.actuators.alpha))
        row.update(zip([f"alpha_cmd_{k}" for k in range(1, 5)], plant.actuators.alpha_cmd))
        row.update(zip([f"alpha_hat_{k}" for k in range(1, 5)], est.state.alpha_hat))
        names = ("Fx", "Fy", "Fz", "Mx", "My", "Mz")
        row.update(zip([f"W_cmd_{c}" for c in names], W_cmd))
        row.update(zip([f"u0_{c}" for c in names], sol.u0))
        row.update(zip([f"W_applied_{c}" for c in names], plant.applied.as_vector()))
        row.update(zip([f"W_true_ext_{c}" for c in names], true_ext))
        row.update(zip([f"W_hat_{c}" for c in names], est.state.wrench))
        row.update({
            "contact": int(plant.contact_active), "v_by": float(R[:, 1] @ body.v),
            "power": power_proxy(plant.actuators, params, cfg.power),
            "servo_rate_max": float(np.nanmax(np.abs(servo))) if np.any(np.isfinite(servo)) else 0.0,
            "kkt_residual": sol.kkt_residual, "iterations": sol.iterations, "status": sol.status,
            "delta_stages": int(np.sum(sol.delta)), "solve_time": sol.solve_time,
        })
        logs.append(row)
        if i == n_ticks - 1:
            break

        start = plant
        try:
            for _ in range(cfg.substeps):
                plant = step(plant, cmd, cfg.dt_sim, params, model, disturbance(plant.time), contact)
        except SimulationDiverged as exc:
            failure = str(exc)
            break
        true_ext = plant.ground_reaction.as_vector() + plant.disturbance.as_vector()
        imu = sample_imu(start.body, plant.body, cfg.dt_ctrl, imu_noise, rng, params.gravity, plant.time)
        omega_meas = plant.actuators.omega_rotor
        if noise.rotor:
            omega_meas = omega_meas * (1.0 + rng.normal(0.0, noise.sigma_rotor_rel, 4))
        est.update(imu, omega_meas, alpha_cmd, cfg.dt_ctrl)

    if logs:
        metrics = compute_metrics(logs, params.r_wheel, cfg.residual_settle)
    else:
        metrics = RunMetrics.empty()
    if failure:
        metrics.failed = True
        metrics.error = failure
        log.warning("%s: %s", cfg.name, failure)
    if write_logs and cfg.out_dir:
        write_outputs(cfg.out_dir, cfg.name, logs, metrics)
    return RunResult(metrics=metrics, logs=logs, trajectory=traj)


@dataclass
class TransientResult:
    t: np.ndarray
    error: np.ndarray          # (n, 6) estimate minus true external wrench
    alpha: np.ndarray          # (n, 4) actual tilt angles
    alpha_cmd: np.ndarray

    @property
    def peak_error(self):
        return float(np.max(np.linalg.norm(self.error, axis=1)))


def servo_transient(params=None, compensate=True, yaw_torque=1.0, period=0.15, duration=0.6,
                    K=10.0, dt_sim=0.001, dt_ctrl=0.01, noise=None, seed=0):
    """Open-loop tilt transient in free flight with no external wrench.

    The wrench command holds hover thrust while a yaw torque of alternating
    sign is switched every ``period`` seconds. Yaw torque comes from
    tangential thrust, so each switch swings every tilt servo through tens
    of degrees. Any estimate is pure error here.
    """
    params = VehicleParams() if params is None else params
    noise = NoiseConfig().off() if noise is None else noise
    model = build_allocation(params)
    rng = np.random.default_rng(seed)
    imu_noise = ImuNoise(noise.sigma_accel, noise.sigma_gyro, noise.imu)
    hover = np.array([0.0, 0.0, params.weight, 0.0, 0.0, 0.0])
    cmd = extract_commands(inverse_allocate(model, hover), params.c_t, omega_max=params.omega_max)
    act = ActuatorState(omega_rotor=cmd.omega_rotor, alpha=cmd.alpha_cmd, alpha_cmd=cmd.alpha_cmd)
    plant = PlantState(body=RigidBodyState(p=[0.0, 0.0, 2.0]), actuators=act)
    est = WrenchEstimator(model, params, K, K, compensate, alpha0=act.alpha)
    substeps = int(round(dt_ctrl / dt_sim))
    rows_t, err, alpha, alpha_cmd = [], [], [], []
    for i in range(int(round(duration / dt_ctrl))):
        t = i * dt_ctrl
        sign = 1.0 if int(t / period + 1e-9) % 2 == 0 else -1.0
        W = hover + np.array([0.0, 0.0, 0.0, 0.0, 0.0, sign * yaw_torque])
        cmd = extract_commands(inverse_allocate(model, W), params.c_t, alpha_prev=cmd.alpha_cmd,
                               omega_max=params.omega_max)
        start = plant
        for _ in range(substeps):
            plant = step(plant, cmd, dt_sim, params, model)
        imu = sample_imu(start.body, plant.body, dt_ctrl, imu_noise, rng, params.gravity, plant.time)
        omega_meas = plant.actuators.omega_rotor
        if noise.rotor:
            omega_meas = omega_meas * (1.0 + rng.normal(0.0, noise.sigma_rotor_rel, 4))
        est.update(imu, omega_meas, cmd.alpha_cmd, dt_ctrl)
        rows_t.append(plant.time)
        err.append(est.state.wrench)
        alpha.append(plant.actuators.alpha)
        alpha_cmd.append(cmd.alpha_cmd)
    return TransientResult(np.array(rows_t), np.array(err), np.array(alpha), np.array(alpha_cmd))


def write_outputs(out_dir, name, logs, metrics):
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, f"{name}_log.csv")
    with open(log_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for row in logs:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in row.items()})
    with open(os.path.join(out_dir, f"{name}_metrics.yaml"), "w") as fh:
        yaml.safe_dump(metrics.to_dict(), fh, sort_keys=True)
    return log_path


def read_log(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        conv = {}
        for k, v in row.items():
            if k in ("phase", "status"):
                conv[k] = v
            else:
                conv[k] = float(v)
        out.append(conv)
    return out
