import numpy as np
import pytest

from tiltropter.allocation import ActuatorCommand, build_allocation, extract_commands, inverse_allocate
from tiltropter.core import ActuatorState, RigidBodyState, VehicleParams
from tiltropter.sim import ImuNoise, ImuSample, PlantState, sample_imu, step
from tiltropter.wrench_est import (
    ServoIdDataset,
    ServoIdentificationError,
    WrenchEstimator,
    WrenchEstimatorState,
    identify_servo_tau,
    initial_state,
    reconstruct_servo_angle,
    simulate_first_order,
    update,
)

PARAMS = VehicleParams()
MODEL = build_allocation(PARAMS)
QUIET = ImuNoise(enabled=False)


def hover_plant(z=2.0):
    W = np.array([0, 0, PARAMS.weight, 0, 0, 0])
    cmd = extract_commands(inverse_allocate(MODEL, W), PARAMS.c_t)
    act = ActuatorState(omega_rotor=cmd.omega_rotor, alpha=cmd.alpha_cmd, alpha_cmd=cmd.alpha_cmd)
    return PlantState(body=RigidBodyState(p=[0, 0, z]), actuators=act), cmd


def run_closed(plant, cmd, est, seconds, disturbance=None):
    """Step plant and estimator at 1 kHz / 100 Hz; return estimate history."""
    history = []
    for _ in range(int(round(seconds / 0.01))):
        start = plant
        for _ in range(10):
            plant = step(plant, cmd, 1e-3, PARAMS, MODEL, disturbance)
        imu = sample_imu(start.body, plant.body, 0.01, QUIET)
        est.update(imu, plant.actuators.omega_rotor, cmd.alpha_cmd, 0.01)
        history.append(est.state.wrench.copy())
    return plant, np.array(history)


def test_zero_disturbance_fixed_point():
    plant, cmd = hover_plant()
    est = WrenchEstimator(MODEL, PARAMS, alpha0=plant.actuators.alpha)
    _, hist = run_closed(plant, cmd, est, 1.0)
    assert np.max(np.abs(hist[-1])) <= 1e-6


def test_step_response_matches_first_order():
    plant, cmd = hover_plant()
    est = WrenchEstimator(MODEL, PARAMS, K_f=10.0, K_m=10.0, alpha0=plant.actuators.alpha)
    _, hist = run_closed(plant, cmd, est, 1.0, disturbance=[1.0, 0, 0, 0, 0, 0])
    t = 0.01 * np.arange(1, len(hist) + 1)
    assert hist[9, 0] == pytest.approx(0.6321, rel=0.02)
    assert abs(hist[49, 0] - 1.0) <= 0.02
    # the whole trajectory tracks the continuous filter
    assert np.max(np.abs(hist[:, 0] - (1 - np.exp(-10 * t)))) <= 0.01


def test_discrete_update_is_exact_filter():
    # synthetic telemetry: no rotors, specific force from a 1 N push
    est = initial_state(PARAMS, K_f=10.0, K_m=10.0)
    imu = ImuSample(a_meas=np.array([1.0 / PARAMS.mass, 0, 0]), omega_meas=np.zeros(3), timestamp=0.0)
    out = []
    for _ in range(100):
        est = update(est, imu, np.zeros(4), np.full(4, np.pi / 2), 0.01, MODEL, PARAMS)
        out.append(est.F_hat[0])
    t = 0.01 * np.arange(1, 101)
    assert np.allclose(out, 1 - np.exp(-10 * t), atol=1e-12)


def test_ground_reaction_recovery():
    body = RigidBodyState(p=[0, 0, PARAMS.r_wheel])
    plant = PlantState(body=body, contact_active=True)
    off = ActuatorCommand(omega_rotor=np.zeros(4), alpha_cmd=np.full(4, np.pi / 2),
                          thrust=np.zeros(4), saturated=False)
    est = WrenchEstimator(MODEL, PARAMS)
    plant, hist = run_closed(plant, off, est, 0.5)
    truth = plant.ground_reaction.F
    assert plant.contact_active
    err = np.abs(hist[-1, :3] - truth)
    assert np.all(err <= 0.05 * np.maximum(np.abs(truth), np.linalg.norm(truth) * 1e-3))


def test_reconstruct_examples():
    assert reconstruct_servo_angle(0.7, 0.7, 0.01, 0.05) == 0.7
    assert reconstruct_servo_angle(0.0, 1.0, 0.05, 0.05) == pytest.approx(1 - np.exp(-1), abs=1e-6)
    a = 0.0
    for _ in range(10):
        a = reconstruct_servo_angle(a, 1.0, 0.005, 0.05)
    assert abs(a - reconstruct_servo_angle(0.0, 1.0, 0.05, 0.05)) <= 1e-9
    with pytest.raises(ValueError):
        reconstruct_servo_angle(0.0, 1.0, 0.01, 0.0)


def test_state_validation_and_reset():
    with pytest.raises(ValueError):
        WrenchEstimatorState(K_f=[1.0, 0.0, 1.0])
    s = WrenchEstimatorState(K_f=np.diag([1.0, 2.0, 3.0]))
    assert np.allclose(s.K_f, [1, 2, 3])
    est = WrenchEstimator(MODEL, PARAMS)
    imu = ImuSample(a_meas=np.array([3.0, 0, 0]), omega_meas=np.zeros(3), timestamp=0.0)
    est.update(imu, np.zeros(4), np.full(4, np.pi / 2), 0.01)
    assert np.any(est.state.wrench != 0)
    est.reset()
    assert np.allclose(est.state.wrench, 0) and np.allclose(est.state.force_integral, 0)


def test_saturation_clamps():
    est = initial_state(PARAMS, K_f=100.0)
    imu = ImuSample(a_meas=np.array([1e4, 0, 0]), omega_meas=np.zeros(3), timestamp=0.0)
    est = update(est, imu, np.zeros(4), np.full(4, np.pi / 2), 0.01, MODEL, PARAMS)
    assert est.saturated
    assert est.F_hat[0] == pytest.approx(10 * PARAMS.weight)


def step_data(tau, sigma=0.0, rng=None, dt=0.002, n=200):
    t = dt * np.arange(n)
    cmd = np.where(t >= 0.02, 1.0, 0.0)
    y = simulate_first_order(t, cmd, tau, 0.0)
    if sigma:
        y = y + rng.normal(0.0, sigma, n)
    return ServoIdDataset(t, cmd, y)


def test_identify_noiseless():
    tau, rms = identify_servo_tau(step_data(0.05))
    assert abs(tau - 0.05) <= 1e-4
    assert rms <= 1e-6


def test_identify_noisy_monte_carlo():
    rng = np.random.default_rng(0)
    for _ in range(100):
        tau, _ = identify_servo_tau(step_data(0.05, 0.01, rng))
        assert abs(tau - 0.05) <= 0.05 * 0.05


def test_identify_fast_servo():
    tau, _ = identify_servo_tau(step_data(0.001, dt=0.0005, n=200))
    assert tau <= 0.002


def test_identify_errors():
    t = 0.01 * np.arange(30)
    with pytest.raises(ServoIdentificationError):
        identify_servo_tau(ServoIdDataset(t, np.ones(30), np.ones(30)))
    with pytest.raises(ServoIdentificationError):
        ServoIdDataset(t[:10], np.ones(10), np.ones(10))
    with pytest.raises(ServoIdentificationError):
        ServoIdDataset(t[::-1], np.ones(30), np.ones(30))
