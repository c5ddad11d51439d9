"""Trajectory interpolation, vehicle queries, synthetic/FTL generation, KDE."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trafnox.core import ConfigError, CutoffShape, SimulationError, SpatialGrid
from trafnox.lagrangian import (
    Fleet,
    FtlConfig,
    FtlState,
    KdeConfig,
    Trajectory,
    closest_vehicle,
    coverage_count,
    generate_synthetic,
    interpolate,
    kde_density,
    kde_velocity,
    optimal_velocity,
    run_ftl,
    step_ftl,
    synthetic_acceleration,
    synthetic_position,
    synthetic_speed,
)

SHAPE = CutoffShape(ell=0.2, big_l=0.6)


def _line_fleet(*positions_and_speeds):
    return Fleet(tuple(
        Trajectory.from_line(f"v{i}", x0, v)
        for i, (x0, v) in enumerate(positions_and_speeds)
    ))


# ---------------------------------------------------------------------------
# trajectories and interpolation
# ---------------------------------------------------------------------------

def test_trajectory_validation():
    with pytest.raises(ConfigError):
        Trajectory("bad", times_h=np.array([0.0, 0.0]), positions_km=np.array([0.0, 1.0]))
    with pytest.raises(ConfigError):
        Trajectory("bad", times_h=np.array([0.0, 1.0]), positions_km=np.array([1.0, 0.0]))
    with pytest.raises(ConfigError):
        Trajectory("bad", times_h=np.array([0.0]), positions_km=np.array([0.0]))


def test_interpolate_linear_segment():
    traj = Trajectory("a", times_h=np.array([0.0, 1.0]), positions_km=np.array([0.0, 10.0]))
    p, p_dot, p_ddot = interpolate(traj, 0.5)
    assert p == pytest.approx(5.0)
    assert p_dot == pytest.approx(10.0)
    assert p_ddot == 0.0


def test_interpolate_at_sample_nodes():
    traj = Trajectory("a", times_h=np.array([0.0, 1.0]), positions_km=np.array([0.0, 10.0]),
                      speeds_kmh=np.array([0.0, 20.0]))
    p0, v0, _ = interpolate(traj, 0.0)
    p1, v1, _ = interpolate(traj, 1.0)
    assert (p0, v0) == (0.0, 0.0)
    assert (p1, v1) == (10.0, 20.0)


def test_interpolate_speed_ramp():
    traj = Trajectory("a", times_h=np.array([0.0, 1.0]), positions_km=np.array([0.0, 10.0]),
                      speeds_kmh=np.array([0.0, 20.0]))
    p, p_dot, p_ddot = interpolate(traj, 0.5)
    assert p == pytest.approx(5.0)
    assert p_dot == pytest.approx(10.0)
    assert p_ddot == pytest.approx(20.0)  # ramp slope over one segment


def test_interpolate_off_road_signal():
    traj = Trajectory.from_line("a", 0.0, 10.0, t0_h=0.25, t1_h=0.75)
    assert interpolate(traj, 0.1) is None
    assert interpolate(traj, 0.9) is None
    assert interpolate(traj, 0.5) is not None


def test_slope_acceleration_across_segment_midpoints():
    # speeds 10 then 30 km/h on two unit segments -> p_ddot = (30-10)/1
    traj = Trajectory("a", times_h=np.array([0.0, 1.0, 2.0]),
                      positions_km=np.array([0.0, 10.0, 40.0]))
    _, p_dot, p_ddot = interpolate(traj, 0.5)
    assert p_dot == pytest.approx(10.0)
    assert p_ddot == pytest.approx(20.0)
    _, p_dot_2, p_ddot_2 = interpolate(traj, 1.5)
    assert p_dot_2 == pytest.approx(30.0)
    assert p_ddot_2 == 0.0  # last segment: no forward midpoint


# ---------------------------------------------------------------------------
# fleet queries
# ---------------------------------------------------------------------------

def test_closest_vehicle_cases():
    assert closest_vehicle(Fleet.empty(), 1.0, 0.5) is None
    fleet = _line_fleet((2.0, 0.0))
    assert closest_vehicle(fleet, 3.0, 0.5) == 0
    fleet = _line_fleet((1.0, 0.0), (5.0, 0.0))
    assert closest_vehicle(fleet, 2.9, 0.5) == 0
    fleet = _line_fleet((1.0, 0.0), (3.0, 0.0))
    assert closest_vehicle(fleet, 2.0, 0.5) == 0  # tie -> lowest index


def test_closest_vehicle_ignores_off_road():
    early = Trajectory.from_line("early", 1.0, 0.0, t0_h=0.0, t1_h=0.1)
    late = Trajectory.from_line("late", 5.0, 0.0, t0_h=0.0, t1_h=1.0)
    fleet = Fleet((early, late))
    assert closest_vehicle(fleet, 1.0, 0.5) == 1


@settings(max_examples=50)
@given(st.data())
def test_closest_vehicle_matches_linear_scan(data):
    n = data.draw(st.integers(min_value=1, max_value=6))
    positions = [data.draw(st.floats(0.0, 10.0)) for _ in range(n)]
    x = data.draw(st.floats(-1.0, 11.0))
    fleet = _line_fleet(*((p, 0.0) for p in positions))
    expected = min(range(n), key=lambda i: (abs(x - positions[i]), i))
    assert closest_vehicle(fleet, x, 0.5) == expected


def test_coverage_count_cases():
    assert coverage_count(Fleet.empty(), 1.0, 0.5, SHAPE) == 0
    fleet = _line_fleet((1.0, 0.0))
    assert coverage_count(fleet, 1.5, 0.5, SHAPE) == 1
    assert coverage_count(fleet, 1.7, 0.5, SHAPE) == 0  # |x-p| >= L
    clustered = _line_fleet((1.0, 0.0), (1.001, 0.0), (1.002, 0.0))
    assert coverage_count(clustered, 1.0, 0.5, SHAPE) == 3


def test_coverage_iff_closest_within_support():
    rng = np.random.default_rng(7)
    for _ in range(100):
        fleet = _line_fleet(*((float(p), 0.0) for p in rng.uniform(0, 5, size=3)))
        x = float(rng.uniform(-1, 6))
        _, positions, _, _ = fleet.snapshot(0.5)
        nearest_dist = np.min(np.abs(positions - x))
        covered = coverage_count(fleet, x, 0.5, SHAPE) >= 1
        assert covered == (nearest_dist < SHAPE.big_l)


# ---------------------------------------------------------------------------
# synthetic platoon
# ---------------------------------------------------------------------------

def test_synthetic_initial_conditions():
    n, c, horizon, v_max = 41, 0.3, 1.0 / 3.0, 90.0
    assert synthetic_position(0, 0.0, n, c, horizon, v_max) == pytest.approx(1.0)
    assert synthetic_position(40, 0.0, n, c, horizon, v_max) == pytest.approx(3.0)
    for idx in (0, 20, 40):
        assert synthetic_speed(idx, 0.0, n, c, horizon, v_max) == pytest.approx(27.0)


def test_synthetic_peak_speed():
    n, c, horizon, v_max = 41, 0.3, 1.0 / 3.0, 90.0
    t = np.linspace(0.0, horizon, 20001)
    speeds = synthetic_speed(7, t, n, c, horizon, v_max)
    assert np.max(speeds) == pytest.approx(2 * c * v_max, rel=1e-6)
    assert np.min(speeds) >= 0.0


def test_synthetic_position_speed_consistency():
    # numerical derivative of x_i reproduces v_i
    n, c, horizon, v_max = 11, 0.3, 1.0 / 3.0, 90.0
    dt = 1e-7
    t = np.linspace(0.05, horizon - 0.05, 13)
    for idx in (0, 5, 10):
        x_plus = synthetic_position(idx, t + dt, n, c, horizon, v_max)
        x_minus = synthetic_position(idx, t - dt, n, c, horizon, v_max)
        v = synthetic_speed(idx, t, n, c, horizon, v_max)
        assert np.allclose((x_plus - x_minus) / (2 * dt), v, rtol=1e-5, atol=1e-5)


def test_synthetic_acceleration_is_speed_derivative():
    n, c, horizon, v_max = 11, 0.3, 1.0 / 3.0, 90.0
    dt = 1e-7
    for idx, t in ((0, 0.093), (5, 0.177), (10, 0.291)):
        fd = (synthetic_speed(idx, t + dt, n, c, horizon, v_max)
              - synthetic_speed(idx, t - dt, n, c, horizon, v_max)) / (2 * dt)
        a = synthetic_acceleration(idx, t, n, c, horizon, v_max)
        assert a == pytest.approx(fd, rel=1e-4, abs=1e-3)
        # the verbatim variant flips the prefactor (T/(k pi) instead of k pi/T)
        k = 20.0 + 5.0 * idx / (n - 1)
        verbatim = synthetic_acceleration(idx, t, n, c, horizon, v_max, verbatim=True)
        assert verbatim == pytest.approx(a * (horizon / (k * math.pi)) ** 2, rel=1e-12)


def test_generate_synthetic_fleet():
    fleet = generate_synthetic(n=5, c=0.3, horizon_h=1.0 / 3.0, v_max=90.0,
                               sample_dt_h=1.0 / 3600.0)
    assert len(fleet) == 5
    traj = fleet.trajectories[0]
    assert traj.times_h[0] == 0.0
    assert traj.times_h[-1] == pytest.approx(1.0 / 3.0)
    assert traj.speeds_kmh is not None
    point = interpolate(traj, 0.123)
    exact = synthetic_position(0, 0.123, 5, 0.3, 1.0 / 3.0, 90.0)
    assert point[0] == pytest.approx(exact, abs=2e-4)  # 1 s sampling, <0.2 m error


# ---------------------------------------------------------------------------
# follow the leader
# ---------------------------------------------------------------------------

CFG = FtlConfig(n_vehicles=4, accel_gain=1.0, preferred_gap_km=0.05,
                leader_speed_kmh=50.0, relaxation_time_h=1.0 / 120.0)


def test_ftl_equilibrium_is_steady():
    x = np.arange(4) * CFG.preferred_gap_km
    v = np.full(4, CFG.leader_speed_kmh)
    state = FtlState(positions_km=x, speeds_kmh=v)
    stepped = step_ftl(state, CFG, dt_h=CFG.relaxation_time_h / 4.0)
    assert np.allclose(stepped.speeds_kmh, CFG.leader_speed_kmh, atol=1e-12)
    assert np.allclose(np.diff(stepped.positions_km), CFG.preferred_gap_km, atol=1e-12)


def test_ftl_slow_follower_accelerates():
    x = np.array([0.0, 0.5, 1.0, 1.5])  # gaps far above preferred
    v = np.array([10.0, 50.0, 50.0, 50.0])
    state = FtlState(positions_km=x, speeds_kmh=v)
    stepped = step_ftl(state, CFG, dt_h=CFG.relaxation_time_h / 4.0)
    assert stepped.speeds_kmh[0] > 10.0
    assert stepped.speeds_kmh[-1] == 50.0  # leader keeps its speed


def test_ftl_optimal_velocity_shape():
    g_min = 0.2 * CFG.preferred_gap_km
    assert optimal_velocity(g_min, CFG) == 0.0
    assert optimal_velocity(CFG.preferred_gap_km, CFG) == pytest.approx(CFG.leader_speed_kmh)
    assert optimal_velocity(10.0, CFG) == pytest.approx(2 * CFG.leader_speed_kmh)


def test_ftl_collision_detection():
    state = FtlState(positions_km=np.array([0.0, 1e-4]),
                     speeds_kmh=np.array([100.0, 0.0]))
    cfg = FtlConfig(n_vehicles=2, accel_gain=1.0, preferred_gap_km=0.05,
                    leader_speed_kmh=50.0, relaxation_time_h=1.0 / 120.0)
    with pytest.raises(SimulationError):
        step_ftl(state, cfg, dt_h=cfg.relaxation_time_h / 4.0)


def test_ftl_ordering_preserved_under_stability_bound():
    # string-stable regime: relaxation_time * dV_opt/dgap < 1/2
    rng = np.random.default_rng(3)
    cfg = FtlConfig(n_vehicles=12, accel_gain=2.0, preferred_gap_km=1.0,
                    leader_speed_kmh=40.0, relaxation_time_h=1.0 / 120.0)
    x = np.cumsum(rng.uniform(0.5, 1.5, size=12))
    v = rng.uniform(35.0, 45.0, size=12)
    state = FtlState(positions_km=x, speeds_kmh=v)
    for _ in range(200):
        state = step_ftl(state, cfg, dt_h=cfg.relaxation_time_h / 4.0)
        assert np.all(np.diff(state.positions_km) > 0)


def test_ftl_stop_and_go_oscillations():
    # string-unstable platoon: relaxation_time * dV_opt/dgap > 1/2
    n = 50
    cfg = FtlConfig(n_vehicles=n, accel_gain=1.0, preferred_gap_km=0.1,
                    leader_speed_kmh=30.0, relaxation_time_h=1.0 / 480.0)
    x = np.arange(n) * cfg.preferred_gap_km
    v = np.full(n, cfg.leader_speed_kmh)
    v[n // 2] = 15.0  # one braking vehicle seeds the wave
    state = FtlState(positions_km=x, speeds_kmh=v)
    dt = cfg.relaxation_time_h / 8.0
    stds, probe = [], []
    for _ in range(600):
        state = step_ftl(state, cfg, dt_h=dt)
        stds.append(float(np.std(state.speeds_kmh)))
        probe.append(float(state.speeds_kmh[10]))
    probe_arr = np.array(probe)
    rises = np.any(np.diff(probe_arr) > 1e-9)
    falls = np.any(np.diff(probe_arr) < -1e-9)
    assert rises and falls  # oscillating, not monotone
    assert max(stds) > np.std(v)  # the perturbation grows
    assert stds[-1] > 0.1 * max(stds)  # and persists


def test_run_ftl_returns_consistent_fleet():
    cfg = FtlConfig(n_vehicles=4, accel_gain=1.0, preferred_gap_km=1.0,
                    leader_speed_kmh=50.0, relaxation_time_h=1.0 / 120.0)
    x = np.arange(4) * 1.2
    v = np.array([40.0, 44.0, 47.0, 50.0])
    state = FtlState(positions_km=x, speeds_kmh=v)
    fleet = run_ftl(state, cfg, dt_h=cfg.relaxation_time_h / 4.0, n_steps=50,
                    record_every=5)
    assert len(fleet) == 4
    for traj in fleet.trajectories:
        assert traj.times_h[0] == 0.0
        assert traj.speeds_kmh is not None
    with pytest.raises(SimulationError):
        run_ftl(state, cfg, dt_h=cfg.relaxation_time_h, n_steps=1)


# ---------------------------------------------------------------------------
# kernel density
# ---------------------------------------------------------------------------

GRID = SpatialGrid(a_km=0.0, b_km=4.0, n_cells=400)


def test_kde_density_empty_fleet():
    out = kde_density(Fleet.empty(), 0.0, KdeConfig(bandwidth_km=0.1), GRID)
    assert np.array_equal(out, np.zeros(400))


def test_kde_density_single_vehicle_peak_and_symmetry():
    fleet = _line_fleet((2.0, 0.0))
    rho = kde_density(fleet, 0.0, KdeConfig(bandwidth_km=0.1), GRID)
    centers = GRID.centers()
    peak = centers[np.argmax(rho)]
    assert abs(peak - 2.0) <= GRID.dx_km
    left = np.interp(2.0 - 0.3, centers, rho)
    right = np.interp(2.0 + 0.3, centers, rho)
    assert left == pytest.approx(right, rel=1e-6)


def test_kde_density_platoon_near_constant_interior():
    positions = 1.0 + 0.05 * np.arange(41)
    fleet = _line_fleet(*((float(p), 20.0) for p in positions))
    rho = kde_density(fleet, 0.0, KdeConfig(bandwidth_km=0.1), GRID)
    centers = GRID.centers()
    interior = (centers > 1.4) & (centers < 2.6)  # away from platoon edges
    ratio = np.max(rho[interior]) / np.min(rho[interior])
    assert ratio < 1.05


@pytest.mark.parametrize("normalization, kernel_mass",
                         [("standard", 1.0), ("paper", 1.0 / math.sqrt(2 * math.pi))])
def test_kde_density_total_mass(normalization, kernel_mass):
    # discrete integral matches N x (mass of one kernel) when the grid pads
    # the platoon by >= 5h on each side
    positions = 1.0 + 0.05 * np.arange(41)
    fleet = _line_fleet(*((float(p), 20.0) for p in positions))
    cfg = KdeConfig(bandwidth_km=0.1, normalization=normalization)
    rho = kde_density(fleet, 0.0, cfg, GRID)
    mass = float(np.sum(rho) * GRID.dx_km)
    assert mass == pytest.approx(41 * kernel_mass, rel=0.01)


def test_kde_velocity_weighted_mean():
    fleet = _line_fleet((1.0, 10.0), (3.0, 30.0))
    cfg = KdeConfig(bandwidth_km=0.1)
    v = kde_velocity(fleet, 0.0, cfg, GRID)
    assert np.all(v >= 10.0 - 1e-9) and np.all(v <= 30.0 + 1e-9)
    midway = np.interp(2.0, GRID.centers(), v)
    assert midway == pytest.approx(20.0, abs=1e-6)


def test_kde_velocity_constant_fleet_speed():
    fleet = _line_fleet((1.0, 20.0), (1.5, 20.0), (2.0, 20.0))
    v = kde_velocity(fleet, 0.0, KdeConfig(bandwidth_km=0.1), GRID)
    assert np.allclose(v, 20.0, atol=1e-9)


def test_kde_velocity_underflow_falls_back_to_nearest():
    # bandwidth so small that far cells underflow to zero weight
    fleet = _line_fleet((1.0, 10.0), (3.0, 30.0))
    v = kde_velocity(fleet, 0.0, KdeConfig(bandwidth_km=1e-4), GRID)
    assert np.all(np.isfinite(v))
    centers = GRID.centers()
    assert v[centers < 1.9].max() == pytest.approx(10.0)
    assert v[centers > 2.1].min() == pytest.approx(30.0)


def test_kde_velocity_requires_a_vehicle():
    with pytest.raises(ValueError):
        kde_velocity(Fleet.empty(), 0.0, KdeConfig(bandwidth_km=0.1), GRID)
