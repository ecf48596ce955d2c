import numpy as np
import pytest

from tiltropter.allocation import ActuatorCommand, build_allocation, extract_commands, inverse_allocate
from tiltropter.core import (
    ActuatorState,
    RigidBodyState,
    VehicleParams,
    Wrench,
    quat_from_euler,
    quat_from_yaw,
    quat_to_rotmat,
)
from tiltropter.sim import (
    ContactConfig,
    ImuNoise,
    PlantState,
    SimulationDiverged,
    Simulator,
    constraint_reaction,
    dynamics_derivative,
    mechanical_energy,
    resolve_contact,
    sample_imu,
    step,
)

PARAMS = VehicleParams()
MODEL = build_allocation(PARAMS)
MG = PARAMS.weight


def commands_for(W, alpha_prev=None):
    return extract_commands(inverse_allocate(MODEL, W), PARAMS.c_t, alpha_prev=alpha_prev)


def off():
    return ActuatorCommand(omega_rotor=np.zeros(4), alpha_cmd=np.full(4, np.pi / 2),
                           thrust=np.zeros(4), saturated=False)


def test_derivative_examples():
    s = RigidBodyState()
    d = dynamics_derivative(s, Wrench(), Wrench(), PARAMS)
    assert np.allclose(d[3:6], [0, 0, -9.81]) and np.allclose(np.delete(d, [5]), 0.0)
    d = dynamics_derivative(s, Wrench([0, 0, MG]), Wrench(), PARAMS)
    assert np.allclose(d[3:6], 0.0, atol=1e-12)
    d = dynamics_derivative(RigidBodyState(omega=[0, 0, 3.0]), Wrench(), Wrench(), PARAMS)
    assert np.allclose(d[10:13], 0.0)
    # external force enters the same way as the actuator force
    d1 = dynamics_derivative(s, Wrench([1, 0, 0]), Wrench(), PARAMS)
    d2 = dynamics_derivative(s, Wrench(), Wrench([1, 0, 0]), PARAMS)
    assert np.allclose(d1, d2)


def test_ballistic_drop():
    plant = PlantState(body=RigidBodyState(p=[0, 0, 2.0]))
    for _ in range(500):
        plant = step(plant, off(), 1e-3, PARAMS, MODEL)
    assert abs(plant.body.p[2] - (2 - 0.5 * 9.81 * 0.25)) <= 1e-4
    assert abs(plant.body.p[2] - 0.7738) <= 1e-4


def test_servo_step():
    act = ActuatorState(omega_rotor=np.full(4, 100.0), alpha=np.zeros(4), alpha_cmd=np.zeros(4))
    plant = PlantState(body=RigidBodyState(p=[0, 0, 5.0]), actuators=act)
    cmd = ActuatorCommand(omega_rotor=np.full(4, 100.0), alpha_cmd=np.ones(4), thrust=np.zeros(4), saturated=False)
    for _ in range(50):
        plant = step(plant, cmd, 1e-3, PARAMS, MODEL)
    assert np.allclose(plant.actuators.alpha, 1 - np.exp(-1), atol=1e-6)


def test_rotor_lag_option():
    params = PARAMS.with_(tau_rotor=0.02)
    plant = PlantState(body=RigidBodyState(p=[0, 0, 5.0]))
    cmd = ActuatorCommand(omega_rotor=np.full(4, 1000.0), alpha_cmd=np.full(4, np.pi / 2),
                          thrust=np.zeros(4), saturated=False)
    plant = step(plant, cmd, 0.01, params, MODEL)
    assert np.allclose(plant.actuators.omega_rotor, 1000 * (1 - np.exp(-0.5)))


def test_hover_holds_position():
    cmd = commands_for([0, 0, MG, 0, 0, 0])
    act = ActuatorState(omega_rotor=cmd.omega_rotor, alpha=cmd.alpha_cmd, alpha_cmd=cmd.alpha_cmd)
    sim = Simulator(PARAMS, PlantState(body=RigidBodyState(p=[0, 0, 1.0]), actuators=act))
    start = sim.state.body.p.copy()
    sim.advance(cmd, 10.0)
    assert np.linalg.norm(sim.state.body.p - start) <= 1e-3


def test_step_rejects_bad_dt():
    with pytest.raises(ValueError):
        step(PlantState(), off(), 0.02, PARAMS, MODEL)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_last_state():
    plant = PlantState(body=RigidBodyState(p=[0, 0, 5.0], omega=[1e200, 0, 0]))
    with pytest.raises(SimulationDiverged) as info:
        step(plant, off(), 1e-3, PARAMS, MODEL)
    assert info.value.last_state is plant


@pytest.mark.parametrize("gravity", [(0.0, 0.0, 0.0), (0.0, 0.0, -9.81)])
def test_energy_and_norm_in_free_flight(gravity):
    # asymmetric inertia so the torque-free spin actually tumbles
    params = PARAMS.with_(inertia=np.diag([0.012, 0.015, 0.02]), gravity=np.array(gravity))
    body = RigidBodyState(p=[0, 0, 1000.0], v=[1.0, -0.5, 3.0], q=quat_from_euler(0.2, -0.1, 0.5),
                          omega=[0.4, 2.0, 1.2])
    plant = PlantState(body=body)
    e0 = mechanical_energy(plant.body, params)
    worst_norm = 0.0
    for _ in range(10000):
        plant = step(plant, off(), 1e-3, params, MODEL)
        worst_norm = max(worst_norm, abs(np.linalg.norm(plant.body.q) - 1.0))
    assert not plant.contact_active
    assert abs(mechanical_energy(plant.body, params) - e0) <= 1e-6 * abs(e0)
    assert worst_norm <= 1e-9


def test_resting_contact():
    body = RigidBodyState(p=[0, 0, PARAMS.r_wheel])
    plant = PlantState(body=body, contact_active=True)
    for _ in range(1000):
        plant = step(plant, off(), 1e-3, PARAMS, MODEL)
    world = quat_to_rotmat(plant.body.q) @ plant.ground_reaction.F
    assert plant.contact_active
    assert abs(world[2] - MG) <= 0.01 * MG
    assert abs(plant.body.p[2] - PARAMS.r_wheel) <= 1e-3


def test_airborne_no_reaction():
    reaction, active = resolve_contact(RigidBodyState(p=[0, 0, 1.0]), Wrench(), PARAMS)
    assert not active
    assert np.allclose(reaction.as_vector(), 0.0)


def test_contact_releases_instead_of_pulling():
    body = RigidBodyState(p=[0, 0, PARAMS.r_wheel])
    _, active = resolve_contact(body, Wrench([0, 0, 2 * MG]), PARAMS, was_active=True)
    assert not active
    # not yet touching down while moving up
    moving_up = RigidBodyState(p=[0, 0, PARAMS.r_wheel], v=[0, 0, 0.2])
    assert not resolve_contact(moving_up, Wrench(), PARAMS)[1]


def test_rolling_keeps_lateral_velocity_zero():
    W = np.array([0.0, 0.1, 0.5 * MG, 0.0, 0.0, 0.0])
    cmd = commands_for(W)
    act = ActuatorState(omega_rotor=cmd.omega_rotor, alpha=cmd.alpha_cmd, alpha_cmd=cmd.alpha_cmd)
    body = RigidBodyState(p=[0, 0, PARAMS.r_wheel], v=[1.0, 0, 0], q=quat_from_yaw(0.0))
    plant = PlantState(body=body, actuators=act, contact_active=True)
    worst = 0.0
    for _ in range(2000):
        plant = step(plant, cmd, 1e-3, PARAMS, MODEL)
        worst = max(worst, abs(quat_to_rotmat(plant.body.q)[:, 1] @ plant.body.v))
    assert plant.contact_active
    assert worst <= 1e-3
    assert abs(plant.body.omega[0]) <= 1e-3
    assert abs(plant.body.p[2] - PARAMS.r_wheel) <= 1e-3


def test_friction_saturates():
    body = RigidBodyState(p=[0, 0, PARAMS.r_wheel]).as_vector()
    w = np.array([0.0, 30.0, 0.0, 0.0, 0.0, 0.0])
    reaction, normal = constraint_reaction(body, w, PARAMS, ContactConfig())
    assert abs(reaction[1]) <= PARAMS.mu_friction * normal + 1e-9
    assert normal >= 0


def test_imu_sign_convention():
    # hover: specific force points up the body z axis, so m a - F = 0
    b = RigidBodyState(p=[0, 0, 1.0])
    imu = sample_imu(b, b, 0.01, ImuNoise(enabled=False))
    assert np.allclose(imu.a_meas, [0, 0, 9.81])
    # free fall reads zero
    b1 = RigidBodyState(v=[0, 0, -0.0981])
    imu = sample_imu(b, b1, 0.01, ImuNoise(enabled=False))
    assert np.allclose(imu.a_meas, 0.0, atol=1e-12)
    spin = RigidBodyState(omega=[0, 0, 1.0])
    assert np.allclose(sample_imu(spin, spin, 0.01, ImuNoise(enabled=False)).omega_meas, [0, 0, 1])


def test_imu_noise_seeded():
    b = RigidBodyState()
    a = sample_imu(b, b, 0.01, ImuNoise(), np.random.default_rng(4))
    c = sample_imu(b, b, 0.01, ImuNoise(), np.random.default_rng(4))
    assert np.array_equal(a.a_meas, c.a_meas)
    assert not np.allclose(a.a_meas, [0, 0, 9.81])
    with pytest.raises(ValueError):
        sample_imu(b, b, 0.0)
