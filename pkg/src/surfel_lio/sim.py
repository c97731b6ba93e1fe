"""Synthetic worlds, analytic trajectories and sensor simulation.

Worlds are sets of finite rectangles. Trajectories are closed-form sums of
sinusoids in a warped time ``u(t)`` that holds the platform still for a
configurable lead-in and then ramps up smoothly, so position, orientation
and their first two derivatives are available exactly. Lidar beams fire
column by column across each sweep, each column at its own timestamp and
pose, so every scan carries genuine motion skew.

All randomness comes from numpy's PCG64 generator seeded per stream, so a
fixed seed reproduces the dataset byte for byte.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose, matrix_to_quat, rot_x
from .imu import GRAVITY, ImuNoise, ImuSeries
from .io import ScanLog, Trajectory, write_imu_log, write_kv, write_scan_log, write_tum


# -- worlds --------------------------------------------------------------------

@dataclass(frozen=True)
class Rect:
    corner: np.ndarray
    e1: np.ndarray
    e2: np.ndarray

    def __post_init__(self):
        for k in ("corner", "e1", "e2"):
            object.__setattr__(self, k, np.asarray(getattr(self, k), dtype=float))
        if np.linalg.norm(np.cross(self.e1, self.e2)) < 1e-12:
            raise ValueError("degenerate rectangle")

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.e1, self.e2)
        return n / np.linalg.norm(n)


def box_faces(lo, hi) -> list[Rect]:
    """Six faces of an axis-aligned box."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    d = hi - lo
    if np.any(d <= 0):
        raise ValueError("box has zero extent")
    ex, ey, ez = np.diag(d)
    return [
        Rect(lo, ey, ez), Rect(lo + ex, ey, ez),
        Rect(lo, ex, ez), Rect(lo + ey, ex, ez),
        Rect(lo, ex, ey), Rect(lo + ez, ex, ey),
    ]


@dataclass
class WorldModel:
    rects: list[Rect]
    name: str = "custom"

    def __post_init__(self):
        if not self.rects:
            raise ValueError("world has no surfaces")
        self._C = np.array([r.corner for r in self.rects])
        self._E1 = np.array([r.e1 for r in self.rects])
        self._E2 = np.array([r.e2 for r in self.rects])
        self._N = np.array([r.normal for r in self.rects])

    def raycast(self, origins: np.ndarray, dirs: np.ndarray, max_range: float = np.inf):
        """Nearest hit distance per ray (inf where nothing is hit)."""
        o = np.asarray(origins, float).reshape(-1, 3)
        u = np.asarray(dirs, float).reshape(-1, 3)
        best = np.full(len(u), np.inf)
        for c, e1, e2, n in zip(self._C, self._E1, self._E2, self._N):
            denom = u @ n
            ok = np.abs(denom) > 1e-12
            dist = np.where(ok, ((c - o) @ n) / np.where(ok, denom, 1.0), np.inf)
            ok &= (dist > 1e-9) & (dist < best) & (dist <= max_range)
            if not ok.any():
                continue
            q = o[ok] + dist[ok, None] * u[ok] - c
            a = (q @ e1) / (e1 @ e1)
            b = (q @ e2) / (e2 @ e2)
            inside = (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1)
            idx = np.nonzero(ok)[0][inside]
            best[idx] = dist[idx]
        return best

    def distance_to_surface(self, pts: np.ndarray) -> np.ndarray:
        """Distance from each point to the nearest rectangle."""
        pts = np.asarray(pts, float).reshape(-1, 3)
        best = np.full(len(pts), np.inf)
        for c, e1, e2 in zip(self._C, self._E1, self._E2):
            q = pts - c
            a = np.clip((q @ e1) / (e1 @ e1), 0, 1)
            b = np.clip((q @ e2) / (e2 @ e2), 0, 1)
            proj = c + a[:, None] * e1 + b[:, None] * e2
            best = np.minimum(best, np.linalg.norm(pts - proj, axis=1))
        return best


# -- trajectories ----------------------------------------------------------------

CHANNELS = ("x", "y", "z", "yaw", "pitch", "roll")


@dataclass
class Channel:
    offset: float = 0.0
    rate: float = 0.0
    terms: tuple = ()  # (amplitude, angular frequency, phase)

    def eval(self, u, du, ddu):
        v = self.offset + self.rate * u
        d1 = np.full_like(u, self.rate)
        d2 = np.zeros_like(u)
        for A, w, ph in self.terms:
            arg = w * u + ph
            v = v + A * np.sin(arg)
            d1 = d1 + A * w * np.cos(arg)
            d2 = d2 - A * w * w * np.sin(arg)
        return v, d1 * du, d2 * du * du + d1 * ddu


@dataclass
class TrajectorySpec:
    channels: dict = field(default_factory=dict)
    duration: float = 60.0
    static_time: float = 1.0
    ramp_time: float = 2.0

    def channel(self, name: str) -> Channel:
        return self.channels.get(name, Channel())


class TrajectoryRangeError(ValueError):
    pass


def _warp(t, spec: TrajectorySpec):
    """Warped time u(t) with u' and u''; zero during the static lead-in."""
    tau = np.maximum(t - spec.static_time, 0.0)
    T = spec.ramp_time
    if T <= 0:
        return tau, (t > spec.static_time).astype(float), np.zeros_like(t)
    x = np.minimum(tau / T, 1.0)
    ramp = x < 1.0
    u = np.where(ramp, T * (2.5 * x ** 4 - 3 * x ** 5 + x ** 6), tau - T / 2)
    du = np.where(ramp, 10 * x ** 3 - 15 * x ** 4 + 6 * x ** 5, 1.0)
    ddu = np.where(ramp, (30 * x ** 2 - 60 * x ** 3 + 30 * x ** 4) / T, 0.0)
    return u, du, ddu


@dataclass
class TrajectorySample:
    R: np.ndarray
    p: np.ndarray
    v: np.ndarray
    a_world: np.ndarray
    omega: np.ndarray
    specific_force: np.ndarray

    def pose(self, i: int = 0) -> Pose:
        return Pose.from_rt(self.R[i], self.p[i])


def euler_zyx(yaw, pitch, roll) -> np.ndarray:
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    R = np.empty(np.shape(yaw) + (3, 3))
    R[..., 0, 0] = cy * cp
    R[..., 0, 1] = cy * sp * sr - sy * cr
    R[..., 0, 2] = cy * sp * cr + sy * sr
    R[..., 1, 0] = sy * cp
    R[..., 1, 1] = sy * sp * sr + cy * cr
    R[..., 1, 2] = sy * sp * cr - cy * sr
    R[..., 2, 0] = -sp
    R[..., 2, 1] = cp * sr
    R[..., 2, 2] = cp * cr
    return R


def eval_trajectory(spec: TrajectorySpec, t, gravity=GRAVITY) -> TrajectorySample:
    """Pose, velocity, body rate and specific force at times ``t``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t < -1e-12) or np.any(t > spec.duration + 1e-9):
        raise TrajectoryRangeError(f"time outside [0, {spec.duration}]")
    u, du, ddu = _warp(t, spec)
    vals = {k: spec.channel(k).eval(u, du, ddu) for k in CHANNELS}
    p = np.stack([vals[k][0] for k in "xyz"], axis=1)
    v = np.stack([vals[k][1] for k in "xyz"], axis=1)
    a = np.stack([vals[k][2] for k in "xyz"], axis=1)
    (yaw, dyaw, _), (pitch, dpitch, _), (roll, droll, _) = vals["yaw"], vals["pitch"], vals["roll"]
    R = euler_zyx(yaw, pitch, roll)
    sr, cr = np.sin(roll), np.cos(roll)
    sp, cp = np.sin(pitch), np.cos(pitch)
    omega = np.stack([droll - dyaw * sp,
                      dpitch * cr + dyaw * sr * cp,
                      -dpitch * sr + dyaw * cr * cp], axis=1)
    f = np.einsum("nji,nj->ni", R, a - np.asarray(gravity, float))
    return TrajectorySample(R, p, v, a, omega, f)


# -- sensors ---------------------------------------------------------------------

@dataclass
class LidarConfig:
    lidar_id: int = 0
    channels: int = 16
    vfov: tuple = (-15.0, 15.0)  # degrees
    columns: int = 120
    rate: float = 10.0
    max_range: float = 30.0
    min_range: float = 0.3
    range_noise: float = 0.02
    extrinsic: Pose = field(default_factory=Pose)

    def beam_dirs(self) -> np.ndarray:
        """Unit beam directions in the sensor frame, shape (columns, channels, 3)."""
        el = np.radians(np.linspace(self.vfov[0], self.vfov[1], self.channels))
        az = 2 * np.pi * np.arange(self.columns) / self.columns
        ca, sa = np.cos(az)[:, None], np.sin(az)[:, None]
        ce, se = np.cos(el)[None, :], np.sin(el)[None, :]
        return np.stack(np.broadcast_arrays(ca * ce, sa * ce, np.ones_like(ca) * se), axis=-1)


@dataclass
class ImuSimConfig:
    rate: float = 400.0
    noise: ImuNoise = field(default_factory=ImuNoise)
    gyro_bias: tuple = (0.004, -0.003, 0.002)
    accel_bias: tuple = (0.03, -0.02, 0.04)
    noisy: bool = True


@dataclass
class SimConfig:
    lidars: list = field(default_factory=list)
    imu: ImuSimConfig = field(default_factory=ImuSimConfig)
    seed: int = 0

    @property
    def primary(self) -> LidarConfig:
        return self.lidars[0]


def default_lidars(noisy: bool = True) -> list[LidarConfig]:
    sigma = 0.02 if noisy else 0.0
    primary = LidarConfig(0, 16, (-15.0, 15.0), 180, 10.0, 30.0, 0.3, sigma,
                          Pose.from_rt(np.eye(3), [0.05, 0.0, 0.10]))
    # second unit tilted on its side so it sweeps vertically, at twice the rate
    secondary = LidarConfig(1, 8, (-10.0, 10.0), 90, 20.0, 30.0, 0.3, sigma,
                            Pose.from_rt(rot_x(np.pi / 2), [0.0, 0.10, 0.05]))
    return [primary, secondary]


def default_sim_config(noisy: bool = True, seed: int = 0) -> SimConfig:
    imu = ImuSimConfig(noisy=noisy)
    if not noisy:
        imu.gyro_bias = (0.0, 0.0, 0.0)
        imu.accel_bias = (0.0, 0.0, 0.0)
    return SimConfig(default_lidars(noisy), imu, seed)


def raycast_scan(world: WorldModel, traj: TrajectorySpec, cfg: LidarConfig, t0: float,
                 rng: np.random.Generator | None = None, pose_fn=None):
    """One sweep starting at ``t0``; returns (t, xyz in sensor frame).

    Columns fire at ``t0 + j / (columns * rate)``; every column uses the body
    pose at its own timestamp. Missed beams and returns outside
    ``[min_range, max_range]`` are dropped.
    """
    dirs = cfg.beam_dirs()
    ncol, nch = dirs.shape[:2]
    tc = t0 + np.arange(ncol) / (ncol * cfg.rate)
    tc = np.minimum(tc, traj.duration)
    if pose_fn is None:
        s = eval_trajectory(traj, tc)
        Rb, pb = s.R, s.p
    else:
        Rb, pb = pose_fn(tc)
    Rs = Rb @ cfg.extrinsic.R
    origins = pb + np.einsum("nij,j->ni", Rb, cfg.extrinsic.p)
    world_dirs = np.einsum("cij,ckj->cki", Rs, dirs)
    rng_ = world.raycast(np.repeat(origins, nch, axis=0), world_dirs.reshape(-1, 3), cfg.max_range)
    t = np.repeat(tc, nch)
    hit = np.isfinite(rng_) & (rng_ >= cfg.min_range)
    r = rng_[hit]
    if cfg.range_noise > 0 and rng is not None:
        r = r + rng.normal(0.0, cfg.range_noise, size=r.shape)
    xyz = dirs.reshape(-1, 3)[hit] * r[:, None]
    return t[hit], xyz


def simulate_imu(traj: TrajectorySpec, cfg: ImuSimConfig, rng: np.random.Generator | None = None,
                 t_end: float | None = None) -> ImuSeries:
    """IMU samples at ``i / rate`` over ``[0, t_end)`` with noise and biases."""
    t_end = traj.duration if t_end is None else t_end
    n = int(np.floor(t_end * cfg.rate + 1e-9))
    t = np.arange(n) / cfg.rate
    s = eval_trajectory(traj, t, cfg.noise.g)
    gyro = s.omega.copy()
    acc = s.specific_force.copy()
    bg = np.tile(np.asarray(cfg.gyro_bias, float), (n, 1))
    ba = np.tile(np.asarray(cfg.accel_bias, float), (n, 1))
    if cfg.noisy and rng is not None:
        dt = 1.0 / cfg.rate
        nz = cfg.noise
        bg = bg + np.cumsum(rng.normal(0, nz.gyro_walk * np.sqrt(dt), size=(n, 3)), axis=0)
        ba = ba + np.cumsum(rng.normal(0, nz.accel_walk * np.sqrt(dt), size=(n, 3)), axis=0)
        gyro = gyro + rng.normal(0, nz.gyro_noise / np.sqrt(dt), size=(n, 3))
        acc = acc + rng.normal(0, nz.accel_noise / np.sqrt(dt), size=(n, 3))
    return ImuSeries(t, gyro + bg, acc + ba)


# -- presets ---------------------------------------------------------------------

def _ch(offset=0.0, rate=0.0, *terms):
    return Channel(offset, rate, tuple(terms))


def room_world() -> WorldModel:
    return WorldModel(box_faces([-4.0, -3.0, 0.0], [4.0, 3.0, 3.0]), "room")


def room_trajectory(duration: float = 60.0) -> TrajectorySpec:
    return TrajectorySpec({
        "x": _ch(0.0, 0.0, (1.8, 0.21, 0.0), (0.3, 0.67, 1.0)),
        "y": _ch(0.0, 0.0, (1.2, 0.29, 0.5), (0.2, 0.83, 0.3)),
        "z": _ch(1.5, 0.0, (0.3, 0.37, 0.2)),
        "yaw": _ch(0.0, 0.15, (0.6, 0.23, 0.0)),
        "pitch": _ch(0.0, 0.0, (0.08, 0.53, 0.4)),
        "roll": _ch(0.0, 0.0, (0.08, 0.61, 1.1)),
    }, duration)


def corridor_world() -> WorldModel:
    outer = box_faces([-12.0, -8.0, 0.0], [12.0, 8.0, 3.0])
    # inner block: only its four vertical faces are visible from the corridor
    inner = box_faces([-6.0, -3.0, 0.0], [6.0, 3.0, 3.0])[:4]
    return WorldModel(outer + inner, "corridor-loop")


def corridor_trajectory(duration: float = 80.0, period: float = 36.0) -> TrajectorySpec:
    w = 2 * np.pi / period
    # ellipse through the middle of the corridor, heading along the tangent
    return TrajectorySpec({
        "x": _ch(0.0, 0.0, (9.0, w, np.pi / 2)),
        "y": _ch(0.0, 0.0, (5.5, w, 0.0)),
        "z": _ch(1.5, 0.0, (0.1, 0.7, 0.0)),
        "yaw": _ch(np.pi / 2, w, (0.15, 2 * w, 0.0)),
        "pitch": _ch(0.0, 0.0, (0.05, 0.5, 0.3)),
        "roll": _ch(0.0, 0.0, (0.05, 0.6, 1.0)),
    }, duration, ramp_time=4.0)


def two_scale_world(seed: int = 7) -> WorldModel:
    rects = box_faces([-7.0, -5.0, 0.0], [7.0, 5.0, 4.0])
    rng = np.random.default_rng(seed)
    # small panels standing off the walls at assorted angles
    for _ in range(24):
        side = rng.integers(4)
        along = rng.uniform(-0.8, 0.8)
        h = rng.uniform(0.5, 3.0)
        size = rng.uniform(0.25, 0.5)
        tilt = rng.uniform(-0.6, 0.6)
        if side < 2:
            x = (-7.0 + 0.4) if side == 0 else (7.0 - 0.4)
            c = np.array([x, along * 5.0, h])
            e1 = size * np.array([np.sin(tilt), np.cos(tilt), 0.0])
        else:
            y = (-5.0 + 0.4) if side == 2 else (5.0 - 0.4)
            c = np.array([along * 7.0, y, h])
            e1 = size * np.array([np.cos(tilt), np.sin(tilt), 0.0])
        e2 = np.array([0.0, 0.0, size])
        rects.append(Rect(c, e1, e2))
    return WorldModel(rects, "two-scale")


def two_scale_trajectory(duration: float = 60.0) -> TrajectorySpec:
    return TrajectorySpec({
        "x": _ch(0.0, 0.0, (3.5, 0.19, 0.0), (0.4, 0.71, 0.2)),
        "y": _ch(0.0, 0.0, (2.2, 0.27, 0.4)),
        "z": _ch(1.6, 0.0, (0.3, 0.41, 0.0)),
        "yaw": _ch(0.0, 0.12, (0.5, 0.25, 0.3)),
        "pitch": _ch(0.0, 0.0, (0.06, 0.55, 0.0)),
        "roll": _ch(0.0, 0.0, (0.06, 0.47, 0.9)),
    }, duration)


def static_trajectory(duration: float = 10.0) -> TrajectorySpec:
    return TrajectorySpec({"z": _ch(1.5)}, duration)


WORLDS = {
    "room": (room_world, room_trajectory),
    "corridor-loop": (corridor_world, corridor_trajectory),
    "two-scale": (two_scale_world, two_scale_trajectory),
    "static-room": (room_world, static_trajectory),
}


def preset(name: str, duration: float | None = None):
    if name not in WORLDS:
        raise ValueError(f"unknown world '{name}'; choose from {sorted(WORLDS)}")
    wf, tf = WORLDS[name]
    return wf(), (tf() if duration is None else tf(duration))


# -- dataset writer --------------------------------------------------------------

def pose_text(P: Pose) -> str:
    w, x, y, z = matrix_to_quat(P.R)
    return " ".join(f"{v:.9f}" for v in (*P.p, x, y, z, w))


def generate_scans(world: WorldModel, traj: TrajectorySpec, cfg: SimConfig) -> ScanLog:
    ts, ids, xyzs = [], [], []
    for lid in cfg.lidars:
        n_sweeps = int(np.floor(traj.duration * lid.rate + 1e-9))
        for k in range(n_sweeps):
            rng = np.random.default_rng([cfg.seed, 1 + lid.lidar_id, k])
            t, xyz = raycast_scan(world, traj, lid, k / lid.rate, rng)
            ts.append(t)
            ids.append(np.full(len(t), lid.lidar_id, np.int64))
            xyzs.append(xyz)
    t = np.concatenate(ts)
    lid = np.concatenate(ids)
    order = np.lexsort((lid, t))
    xyz = np.concatenate(xyzs)[order]
    return ScanLog(t[order], lid[order], xyz, np.ones(len(t)))


def generate_dataset(world: WorldModel, traj: TrajectorySpec, cfg: SimConfig, out_dir) -> dict:
    """Write scans, IMU, ground truth, sensor config and manifest to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scans = generate_scans(world, traj, cfg)
    write_scan_log(out / "scans.csv", scans)
    imu = simulate_imu(traj, cfg.imu, np.random.default_rng([cfg.seed, 0]))
    write_imu_log(out / "imu.csv", imu.t, imu.gyro, imu.acc)
    period = 1.0 / cfg.primary.rate
    n_gt = int(np.floor(traj.duration / period + 1e-9))
    t_gt = np.arange(n_gt) * period
    s = eval_trajectory(traj, t_gt, cfg.imu.noise.g)
    write_tum(out / "groundtruth.txt", Trajectory(t_gt, s.p, s.R))

    nz = cfg.imu.noise
    sensor = {
        "primary_lidar_id": cfg.primary.lidar_id,
        "lidar_period": f"{period:.9g}",
        "imu_rate": f"{cfg.imu.rate:.9g}",
        "gyro_noise": f"{nz.gyro_noise:.9g}",
        "accel_noise": f"{nz.accel_noise:.9g}",
        "gyro_walk": f"{nz.gyro_walk:.9g}",
        "accel_walk": f"{nz.accel_walk:.9g}",
    }
    for lid in cfg.lidars:
        sensor[f"extrinsic_{lid.lidar_id}"] = pose_text(lid.extrinsic)
    write_kv(out / "config.txt", sensor)
    manifest = {
        "world": world.name,
        "seed": cfg.seed,
        "prng": "numpy PCG64 via default_rng([seed, stream, sweep])",
        "duration": f"{traj.duration:.9g}",
        "imu_noisy": int(cfg.imu.noisy),
        "imu_rows": len(imu),
        "scan_points": len(scans),
        "gt_rows": n_gt,
    }
    for lid in cfg.lidars:
        manifest[f"lidar_{lid.lidar_id}"] = (
            f"channels={lid.channels} columns={lid.columns} rate={lid.rate:g} "
            f"vfov={lid.vfov[0]:g}:{lid.vfov[1]:g} max_range={lid.max_range:g} "
            f"range_noise={lid.range_noise:g} sweeps={int(np.floor(traj.duration * lid.rate + 1e-9))}")
    write_kv(out / "manifest.txt", manifest)
    return manifest


__all__ = [
    "Channel", "ImuSimConfig", "LidarConfig", "Rect", "SimConfig", "TrajectoryRangeError",
    "TrajectorySample", "TrajectorySpec", "WorldModel", "box_faces", "corridor_world",
    "default_sim_config", "eval_trajectory", "euler_zyx", "generate_dataset", "generate_scans",
    "preset", "raycast_scan", "room_world", "simulate_imu", "two_scale_world",
]
