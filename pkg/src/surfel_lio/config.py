"""Flat key=value run configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .estimator import SyncConfig
from .geometry import Pose, quat_to_matrix
from .imu import ImuNoise
from .io import ParseError, read_kv, write_kv
from .loop import LoopConfig
from .solver import SolverConfig
from .surfel_map import MapConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # surfel map
    leaf_size: float = 0.1
    max_depth: int = 5
    min_points: int = 6
    min_planarity: float = 0.9
    search_radius: float = 0.1
    max_plane_dist: float = 0.1
    enabled_depths: tuple = (1, 2, 3, 4, 5)
    per_scale_weight: bool = False
    # synchronisation and window
    primary_lidar_id: int = 0
    lidar_period: float = 0.1
    imu_rate: float = 400.0
    knots_per_bundle: int = 4
    window_bundles: int = 4
    max_points_per_bundle: int = 1500
    init_duration: float = 0.8
    # solver
    max_outer: int = 3
    max_inner: int = 4
    huber: float = 0.1
    cost_tol: float = 1e-6
    sigma_lidar: float = 0.05
    lambda_init: float = 1e-4
    outer_tol: float = 1e-4
    # IMU noise
    gyro_noise: float = 1.7e-4
    accel_noise: float = 2e-3
    gyro_walk: float = 1.9e-5
    accel_walk: float = 3e-3
    gravity: tuple = (0.0, 0.0, -9.81)
    # keyframes and loop closure
    kf_distance: float = 0.5
    kf_rotation_deg: float = 15.0
    loop_closure: bool = False
    loop_candidates: int = 10
    loop_min_time_gap: float = 30.0
    loop_max_distance: float = 2.0
    loop_max_fitness: float = 0.3
    loop_cooldown: float = 5.0
    # injected odometry drift, per second of elapsed time (for evaluation only)
    drift_yaw_rate: float = 0.0
    drift_trans_rate: float = 0.0
    # paths
    dataset: str = ""
    output: str = ""
    write_map: bool = False
    seed: int = 0
    extrinsics: dict = field(default_factory=dict)   # lidar id -> Pose (body <- sensor)

    def __post_init__(self):
        self.validate()

    # -- derived component configs ------------------------------------------------
    def map_config(self) -> MapConfig:
        return MapConfig(self.leaf_size, self.max_depth, self.min_points, self.min_planarity,
                         self.search_radius, self.max_plane_dist)

    def sync_config(self) -> SyncConfig:
        return SyncConfig(self.primary_lidar_id, self.lidar_period, self.knots_per_bundle,
                          self.window_bundles, 1.0 / self.imu_rate)

    def solver_config(self) -> SolverConfig:
        return SolverConfig(max_outer=self.max_outer, max_inner=self.max_inner,
                            huber=self.huber if self.huber > 0 else None, cost_tol=self.cost_tol,
                            sigma_lidar=self.sigma_lidar, lambda_init=self.lambda_init,
                            outer_tol=self.outer_tol)

    def imu_noise(self) -> ImuNoise:
        return ImuNoise(self.gyro_noise, self.accel_noise, self.gyro_walk, self.accel_walk,
                        tuple(self.gravity))

    def loop_config(self) -> LoopConfig:
        return LoopConfig(num_candidates=self.loop_candidates, min_time_gap=self.loop_min_time_gap,
                          max_distance=self.loop_max_distance, max_fitness=self.loop_max_fitness,
                          cooldown=self.loop_cooldown)

    def extrinsic(self, lidar_id: int) -> Pose:
        return self.extrinsics.get(int(lidar_id), Pose.identity())

    def validate(self):
        try:
            self.map_config()
            self.sync_config()
            self.solver_config()
            self.imu_noise()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        bad = [d for d in self.enabled_depths if not 0 <= d <= self.max_depth]
        if bad or not self.enabled_depths:
            raise ConfigError(f"enabled_depths must be non-empty and within [0, {self.max_depth}]")
        if self.imu_rate <= 0 or self.max_points_per_bundle < 0 or self.init_duration <= 0:
            raise ConfigError("imu_rate and init_duration must be positive, max_points_per_bundle >= 0")

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    # -- serialisation ------------------------------------------------------------
    def to_items(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "extrinsics":
                for lid in sorted(v):
                    out[f"extrinsic_{lid}"] = _pose_text(v[lid])
            else:
                out[f.name] = _format(v)
        return out

    def save(self, path):
        write_kv(path, self.to_items())

    @classmethod
    def from_items(cls, items: dict, base: "RunConfig | None" = None, source: str = "config") -> "RunConfig":
        kw = {f.name: getattr(base, f.name) for f in fields(cls)} if base is not None else {}
        types = {f.name: f for f in fields(cls)}
        ext = dict(kw.get("extrinsics", {}))
        for k, v in items.items():
            if k.startswith("extrinsic_"):
                try:
                    ext[int(k[len("extrinsic_"):])] = _parse_pose(v)
                except ValueError as e:
                    raise ConfigError(f"{source}: bad value for '{k}': {e}") from None
                continue
            if k not in types or k == "extrinsics":
                raise ConfigError(f"{source}: unknown key '{k}'")
            default = types[k].default if types[k].default is not dataclasses.MISSING else None
            try:
                kw[k] = _parse(v, default)
            except ValueError as e:
                raise ConfigError(f"{source}: bad value for '{k}': {e}") from None
        kw["extrinsics"] = ext
        return cls(**kw)

    @classmethod
    def load(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        try:
            items = read_kv(path)
        except ParseError as e:
            raise ConfigError(str(e)) from None
        return cls.from_items(items, base, str(path))


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, like):
    if isinstance(like, bool):
        t = text.lower()
        if t in ("true", "on", "1", "yes"):
            return True
        if t in ("false", "off", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got '{text}'")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        v = float(text)
        if not np.isfinite(v):
            raise ValueError("must be finite")
        return v
    if isinstance(like, tuple):
        parts = [p for p in text.replace(" ", "").split(",") if p]
        conv = type(like[0]) if like else float
        return tuple(conv(p) for p in parts)
    return text


def _pose_text(P: Pose) -> str:
    from .geometry import matrix_to_quat
    w, x, y, z = matrix_to_quat(P.R)
    return " ".join(f"{v:.12f}" for v in (*P.p, x, y, z, w))


def _parse_pose(text: str) -> Pose:
    vals = [float(v) for v in text.split()]
    if len(vals) != 7:
        raise ValueError("expected 'tx ty tz qx qy qz qw'")
    q = np.array([vals[6], vals[3], vals[4], vals[5]])
    n = np.linalg.norm(q)
    if abs(n - 1.0) > 1e-6:
        raise ValueError("quaternion is not unit norm")
    return Pose.from_rt(quat_to_matrix(q / n), vals[:3])


def load_run_config(dataset=None, config_path=None, **overrides) -> RunConfig:
    """Dataset sensor config, then the user file, then explicit overrides."""
    cfg = RunConfig()
    if dataset is not None:
        p = Path(dataset) / "config.txt"
        if p.exists():
            cfg = RunConfig.load(p, cfg)
        cfg = cfg.replace(dataset=str(dataset))
    if config_path is not None:
        cfg = RunConfig.load(config_path, cfg)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        try:
            cfg = cfg.replace(**overrides)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
    return cfg


__all__ = ["ConfigError", "RunConfig", "load_run_config"]
