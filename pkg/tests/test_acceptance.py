"""Acceptance criteria 1-14, each at its stated tolerance.

Every test records one PASS/FAIL line; the summary is printed at the end of
the pytest run.
"""
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import yaml

from tiltropter.allocation import (
    ActuatorCommand,
    build_allocation,
    extract_commands,
    forward_wrench,
    inverse_allocate,
    servo_rates_from_wrench_rate,
)
from tiltropter.core import ActuatorState, RigidBodyState, VehicleParams, quat_from_euler
from tiltropter.harness import ScenarioConfig, run_scenario, servo_transient
from tiltropter.nmpc import NmpcConfig, control_step
from tiltropter.sim import ImuNoise, PlantState, mechanical_energy, sample_imu, step
from tiltropter.trajectory import Hover, sample_horizon
from tiltropter.wrench_est import ServoIdDataset, WrenchEstimator, identify_servo_tau, simulate_first_order

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
PARAMS = VehicleParams.from_yaml(CONFIGS / "vehicle.yaml")
MODEL = build_allocation(PARAMS)
CFG = NmpcConfig()
RNG_SEED = 2024


def bounded_wrenches(rng, n):
    """Wrenches inside the NMPC wrench box with every rotor above 0.1 N."""
    out = []
    while len(out) < n:
        W = np.r_[rng.uniform(CFG.W_min[:2], CFG.W_max[:2]), rng.uniform(8.0, CFG.W_max[2]),
                  rng.uniform(-1.0, 1.0, 3)]
        T = inverse_allocate(MODEL, W).reshape(4, 2)
        if np.all(np.linalg.norm(T, axis=1) > 0.1):
            out.append(W)
    return np.array(out)


def scenario(name):
    return ScenarioConfig.from_yaml(CONFIGS / "scenarios" / f"{name}.yaml")


def timed_run(cfg):
    t0 = time.perf_counter()
    res = run_scenario(cfg, write_logs=False)
    return res, time.perf_counter() - t0


@pytest.fixture(scope="module")
def aerial_run():
    return timed_run(scenario("aerial_figure_eight"))


@pytest.fixture(scope="module")
def ground_run():
    return timed_run(scenario("ground_figure_eight"))


@pytest.fixture(scope="module")
def hybrid_run():
    return timed_run(scenario("hybrid_mission"))


def test_c01_allocation_round_trip(record):
    Ws = bounded_wrenches(np.random.default_rng(RNG_SEED), 1000)
    t0 = time.perf_counter()
    worst = 0.0
    for W in Ws:
        cmd = extract_commands(inverse_allocate(MODEL, W), PARAMS.c_t)
        back = forward_wrench(MODEL, cmd.omega_rotor, alpha=cmd.alpha_cmd)
        worst = max(worst, np.max(np.abs(back - W)) / np.max(np.abs(W)))
    elapsed = time.perf_counter() - t0
    ok = record(1, "allocation round trip", worst <= 1e-9 and elapsed < 1.0,
                f"max rel err {worst:.2e}, {elapsed:.3f} s")
    assert ok


def test_c02_minimum_norm(record):
    Ws = bounded_wrenches(np.random.default_rng(RNG_SEED + 1), 1000)
    worst = max(np.linalg.norm(MODEL.A_pinv @ MODEL.A @ T - T)
                for T in (inverse_allocate(MODEL, W) for W in Ws))
    assert record(2, "minimum-norm allocation", worst <= 1e-10, f"max |A+AT - T| {worst:.2e}")


def test_c03_servo_rate_consistency(record):
    rng = np.random.default_rng(RNG_SEED + 2)
    Ws = bounded_wrenches(rng, 1000)
    h = 1e-6
    worst = 0.0
    for W in Ws:
        Wd = rng.uniform(-CFG.u_max, CFG.u_max)
        plus = extract_commands(inverse_allocate(MODEL, W + h * Wd), PARAMS.c_t).alpha_cmd
        minus = extract_commands(inverse_allocate(MODEL, W - h * Wd), PARAMS.c_t).alpha_cmd
        fd = (plus - minus) / (2 * h)
        worst = max(worst, np.max(np.abs(servo_rates_from_wrench_rate(MODEL, W, Wd) - fd)))
    assert record(3, "servo-rate consistency", worst <= 1e-5, f"max err {worst:.2e} rad/s")


def _off():
    return ActuatorCommand(omega_rotor=np.zeros(4), alpha_cmd=np.full(4, np.pi / 2),
                           thrust=np.zeros(4), saturated=False)


def test_c04_dynamics_sanity(record):
    plant = PlantState(body=RigidBodyState(p=[0, 0, 2.0]))
    for _ in range(500):
        plant = step(plant, _off(), 1e-3, PARAMS, MODEL)
    drop_err = abs(plant.body.p[2] - (2.0 - 0.5 * 9.81 * 0.25))

    # torque-free tumbling with gravity off, so the flight never meets the ground
    params = PARAMS.with_(inertia=np.diag([0.012, 0.015, 0.02]), gravity=np.zeros(3))
    body = RigidBodyState(p=[0, 0, 5.0], v=[1.0, -0.5, 0.3], q=quat_from_euler(0.2, -0.1, 0.5),
                          omega=[0.4, 2.0, 1.2])
    plant = PlantState(body=body)
    e0 = mechanical_energy(body, params)
    norm_step = 0.0
    for _ in range(10000):
        prev = np.linalg.norm(plant.body.q)
        plant = step(plant, _off(), 1e-3, params, MODEL)
        norm_step = max(norm_step, abs(np.linalg.norm(plant.body.q) - prev))
    drift = abs(mechanical_energy(plant.body, params) - e0) / e0
    ok = drop_err <= 1e-4 and drift <= 1e-6 and norm_step <= 1e-9 and not plant.contact_active
    assert record(4, "dynamics sanity", ok,
                  f"drop err {drop_err:.1e} m, energy drift {drift:.1e}, |q| step {norm_step:.1e}")


def _hover_plant():
    W = np.array([0, 0, PARAMS.weight, 0, 0, 0])
    cmd = extract_commands(inverse_allocate(MODEL, W), PARAMS.c_t)
    act = ActuatorState(omega_rotor=cmd.omega_rotor, alpha=cmd.alpha_cmd, alpha_cmd=cmd.alpha_cmd)
    return PlantState(body=RigidBodyState(p=[0, 0, 2.0]), actuators=act), cmd


def _run_estimator(plant, cmd, est, seconds, disturbance=None):
    hist = []
    for _ in range(int(round(seconds / 0.01))):
        start = plant
        for _ in range(10):
            plant = step(plant, cmd, 1e-3, PARAMS, MODEL, disturbance)
        imu = sample_imu(start.body, plant.body, 0.01, ImuNoise(enabled=False))
        est.update(imu, plant.actuators.omega_rotor, cmd.alpha_cmd, 0.01)
        hist.append(est.state.F_hat.copy())
    return plant, np.array(hist)


def test_c05_estimator_first_order(record):
    plant, cmd = _hover_plant()
    est = WrenchEstimator(MODEL, PARAMS, K_f=10.0, K_m=10.0, alpha0=plant.actuators.alpha)
    _, hist = _run_estimator(plant, cmd, est, 0.5, disturbance=[1.0, 0, 0, 0, 0, 0])
    rise = hist[9, 0]
    ss = abs(hist[49, 0] - 1.0)
    ok = abs(rise - 0.6321) <= 0.02 * 0.6321 and ss <= 0.02
    assert record(5, "estimator first-order response", ok,
                  f"F_hat(0.1 s) = {rise:.4f} N, error at 0.5 s {100 * ss:.2f}%")


def test_c06_ground_reaction_recovery(record):
    plant = PlantState(body=RigidBodyState(p=[0, 0, PARAMS.r_wheel]), contact_active=True)
    est = WrenchEstimator(MODEL, PARAMS, K_f=10.0, K_m=10.0)
    plant, hist = _run_estimator(plant, _off(), est, 0.5)
    truth = plant.ground_reaction.F
    # axes with zero true reaction are judged against 5% of the total
    scale = np.maximum(np.abs(truth), 1e-3 * np.linalg.norm(truth))
    rel = np.abs(hist[-1] - truth) / scale
    assert record(6, "ground-reaction recovery", np.all(rel <= 0.05) and plant.contact_active,
                  f"per-axis error {np.array2string(100 * rel, precision=2)}%")


def test_c07_servo_identification(record):
    rng = np.random.default_rng(RNG_SEED + 7)
    t = 0.002 * np.arange(200)
    cmd = np.where(t >= 0.02, 1.0, 0.0)
    clean = simulate_first_order(t, cmd, 0.05, 0.0)
    taus = np.array([identify_servo_tau(ServoIdDataset(t, cmd, clean + rng.normal(0, 0.01, t.size)))[0]
                     for _ in range(100)])
    worst = np.max(np.abs(taus - 0.05)) / 0.05
    assert record(7, "servo identification", worst <= 0.05, f"worst |tau_hat - tau| {100 * worst:.2f}%")


def test_c08_servo_compensation_benefit(record):
    spec = yaml.safe_load((CONFIGS / "servo_transient.yaml").read_text())
    on = servo_transient(params=PARAMS, compensate=True, **spec).peak_error
    off = servo_transient(params=PARAMS, compensate=False, **spec).peak_error
    reduction = 1.0 - on / off
    assert record(8, "servo-compensation benefit", reduction >= 0.30,
                  f"peak error {on:.4f} vs {off:.4f}, {100 * reduction:.1f}% lower")


def test_c09_aerial_figure_eight(record, aerial_run):
    res, wall = aerial_run
    m = res.metrics
    ok = not m.failed and m.rmse_position <= 0.10 and wall < 60.0
    assert record(9, "aerial figure-eight", ok, f"RMSE {m.rmse_position:.4f} m, {wall:.1f} s wall")


def test_c10_ground_figure_eight(record, ground_run):
    m = ground_run[0].metrics
    ok = (not m.failed and m.rmse_position <= 0.20 and m.max_ground_vby <= 0.05
          and m.max_ground_omega_x <= 0.05 and m.max_ground_height_error <= 0.005)
    assert record(10, "ground figure-eight", ok,
                  f"RMSE {m.rmse_position:.4f} m, |v_By| {m.max_ground_vby:.1e}, "
                  f"|w_x| {m.max_ground_omega_x:.1e}, |p_z - r| {m.max_ground_height_error:.1e}")


def test_c11_hybrid_mission(record, hybrid_run):
    m = hybrid_run[0].metrics
    ok = not m.failed and m.contact_events <= 2 and m.rmse_position <= 0.20
    assert record(11, "hybrid mission", ok,
                  f"RMSE {m.rmse_position:.4f} m, {m.contact_events} contact events, failed={m.failed}")


def test_c12_energy_ratio(record, hybrid_run):
    m = hybrid_run[0].metrics
    ok = m.power_ratio <= 0.15 and m.mean_ground_fz_cmd <= 0.3 * PARAMS.weight
    assert record(12, "energy ratio", ok,
                  f"ground/aerial {m.power_ratio:.4f}, mean ground F_z {m.mean_ground_fz_cmd:.2f} N "
                  f"(limit {0.3 * PARAMS.weight:.2f} N)")


def test_c13_equilibrium_and_determinism(record):
    Q, QN = CFG.Q.copy(), CFG.Q_N.copy()
    Q[:6] = QN[:6] = 0.0
    cfg = CFG.with_(Q=Q, Q_N=QN)
    x = np.r_[0, 0, PARAMS.weight, 0, 0, 0, 0, 0, 1.0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0]
    _, sol = control_step(x, sample_horizon(Hover([0, 0, 1.0]), 0.0, cfg.N, cfg.dt), cfg, PARAMS)
    u_norm = float(np.linalg.norm(sol.inputs))

    short = replace(scenario("hover"), trajectory={"type": "hover", "position": [0, 0, 1.0], "duration": 2.0})
    a = run_scenario(short, write_logs=False).metrics.to_dict(timing=False)
    b = run_scenario(short, write_logs=False).metrics.to_dict(timing=False)
    ok = u_norm <= 1e-6 and a == b
    assert record(13, "NMPC equilibrium and determinism", ok,
                  f"|u*| {u_norm:.1e}, seeded metrics identical={a == b}")


def test_c14_servo_feasibility(record, aerial_run, ground_run):
    rates = [r[0].metrics.max_servo_rate for r in (aerial_run, ground_run)]
    assert record(14, "servo feasibility of NMPC output", max(rates) <= 8.0,
                  f"max implied rate aerial {rates[0]:.3f}, ground {rates[1]:.3f} rad/s")
