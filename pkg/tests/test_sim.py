import numpy as np
import pytest

from surfel_lio.geometry import so3_log
from surfel_lio.imu import GRAVITY, StateEstimate, propagate
from surfel_lio.io import parse_imu_log, parse_scan_log, read_tum
from surfel_lio.sim import (
    Channel, LidarConfig, TrajectoryRangeError, TrajectorySpec, WorldModel, box_faces,
    default_sim_config, eval_trajectory, generate_dataset, preset, raycast_scan, simulate_imu,
)


def test_constant_spec_is_static():
    spec = TrajectorySpec({"z": Channel(1.0), "yaw": Channel(0.4)}, 5.0)
    s = eval_trajectory(spec, np.linspace(0, 5, 7))
    np.testing.assert_array_equal(s.v, 0)
    np.testing.assert_array_equal(s.omega, 0)
    np.testing.assert_allclose(s.specific_force, np.einsum("nji,j->ni", s.R, -GRAVITY), atol=1e-15)


def test_pure_sinusoid_second_derivative():
    A, w = 0.7, 1.3
    spec = TrajectorySpec({"x": Channel(0.0, 0.0, ((A, w, 0.0),))}, 10.0, static_time=0.0, ramp_time=0.0)
    t = np.linspace(0.1, 10, 25)
    s = eval_trajectory(spec, t)
    np.testing.assert_allclose(s.a_world[:, 0], -A * w * w * np.sin(w * t), atol=1e-12)


@pytest.mark.parametrize("name", ["room", "corridor-loop", "two-scale"])
def test_derivatives_match_finite_differences(name):
    _, spec = preset(name)
    t = np.linspace(0.5, spec.duration - 0.5, 40)
    h = 1e-5
    s = eval_trajectory(spec, t)
    sp, sm = eval_trajectory(spec, t + h), eval_trajectory(spec, t - h)
    np.testing.assert_allclose((sp.p - sm.p) / (2 * h), s.v, atol=1e-6)
    np.testing.assert_allclose((sp.v - sm.v) / (2 * h), s.a_world, atol=1e-6)
    w_fd = so3_log(np.swapaxes(sm.R, 1, 2) @ sp.R) / (2 * h)
    np.testing.assert_allclose(w_fd, s.omega, atol=1e-6)


def test_out_of_range_time():
    _, spec = preset("room", 5.0)
    with pytest.raises(TrajectoryRangeError):
        eval_trajectory(spec, [6.0])


def test_trajectories_stay_inside_their_worlds():
    for name in ("room", "corridor-loop", "two-scale"):
        world, spec = preset(name)
        s = eval_trajectory(spec, np.linspace(0, spec.duration, 2000))
        assert world.distance_to_surface(s.p).min() > 0.8


def test_beam_range_in_box_room():
    world = WorldModel(box_faces([-1, -1, -1], [1, 1, 1]))
    spec = TrajectorySpec({}, 1.0)
    cfg = LidarConfig(channels=1, vfov=(0.0, 0.0), columns=4, range_noise=0.0, min_range=0.0)
    _, xyz = raycast_scan(world, spec, cfg, 0.0)
    np.testing.assert_allclose(xyz[0], [1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(np.linalg.norm(xyz, axis=1), 1.0, atol=1e-15)


def test_doubling_range_keeps_hits():
    world = WorldModel(box_faces([-3, -20, -1], [40, 2, 4]), "open")
    spec = TrajectorySpec({"z": Channel(1.0)}, 1.0)
    short = LidarConfig(max_range=10.0, range_noise=0.0)
    long = LidarConfig(max_range=20.0, range_noise=0.0)
    t1, a = raycast_scan(world, spec, short, 0.0)
    t2, b = raycast_scan(world, spec, long, 0.0)
    keys = {tuple(np.round(x, 9)) for x in b}
    assert all(tuple(np.round(x, 9)) in keys for x in a)
    assert len(b) > len(a)


def test_noiseless_points_lie_on_surfaces():
    cfg = default_sim_config(noisy=False)
    for name in ("room", "two-scale"):
        world, spec = preset(name)
        for lid in cfg.lidars:
            t, xyz = raycast_scan(world, spec, lid, 12.3)
            s = eval_trajectory(spec, t)
            Rs = s.R @ lid.extrinsic.R
            pw = np.einsum("nij,nj->ni", Rs, xyz) + s.p + np.einsum("nij,j->ni", s.R, lid.extrinsic.p)
            assert world.distance_to_surface(pw).max() <= 1e-9
            # skew present: columns carry distinct timestamps inside the sweep
            assert t.min() >= 12.3 and t.max() < 12.3 + 1 / lid.rate
            assert len(np.unique(t)) > 10


def test_noiseless_imu_reproduces_trajectory():
    cfg = default_sim_config(noisy=False)
    _, spec = preset("room", 12.0)
    imu = simulate_imu(spec, cfg.imu, None, t_end=12.0)
    seg = imu.segment(1.0, 11.0)
    s0 = eval_trajectory(spec, [1.0])
    _, x1 = propagate(StateEstimate(s0.R[0], s0.p[0], s0.v[0]), seg)
    s1 = eval_trajectory(spec, [11.0])
    assert np.linalg.norm(x1.p - s1.p[0]) <= 1e-3


def test_imu_bias_and_noise_statistics():
    cfg = default_sim_config(noisy=True)
    spec = TrajectorySpec({"z": Channel(1.0)}, 20.0)
    imu = simulate_imu(spec, cfg.imu, np.random.default_rng(3))
    np.testing.assert_allclose(imu.gyro.mean(axis=0), cfg.imu.gyro_bias, atol=2e-3)
    sd = np.std(np.diff(imu.gyro, axis=0), axis=0) / np.sqrt(2)
    np.testing.assert_allclose(sd, cfg.imu.noise.gyro_noise * np.sqrt(cfg.imu.rate), rtol=0.1)


def small_dataset(tmp_path, name, seed=5, world="room", duration=2.0):
    w, spec = preset(world, duration)
    cfg = default_sim_config(noisy=True, seed=seed)
    generate_dataset(w, spec, cfg, tmp_path / name)
    return tmp_path / name


def test_dataset_is_deterministic(tmp_path):
    a = small_dataset(tmp_path, "a")
    b = small_dataset(tmp_path, "b")
    for f in ("scans.csv", "imu.csv", "groundtruth.txt", "config.txt", "manifest.txt"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    c = small_dataset(tmp_path, "c", seed=6)
    assert (a / "scans.csv").read_bytes() != (c / "scans.csv").read_bytes()


def test_dataset_counts_and_round_trip(tmp_path):
    d = small_dataset(tmp_path, "d", duration=3.0)
    gt = read_tum(d / "groundtruth.txt")
    imu = parse_imu_log(d / "imu.csv")
    scans = parse_scan_log(d / "scans.csv")
    assert len(gt) == 30
    assert len(imu) == 1200
    assert set(np.unique(scans.lidar_id).tolist()) == {0, 1}
    sweeps0 = np.unique(np.floor(scans.stream(0).t * 10 + 1e-9))
    assert len(sweeps0) == 30


def test_stationary_dataset_has_constant_ground_truth(tmp_path):
    d = small_dataset(tmp_path, "s", world="static-room", duration=10.0)
    gt = read_tum(d / "groundtruth.txt")
    assert np.ptp(gt.p, axis=0).max() == 0
    assert np.ptp(gt.R.reshape(len(gt), -1), axis=0).max() == 0
