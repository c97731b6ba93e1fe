"""End-to-end odometry and mapping over a recorded dataset."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .deskew import PointCloud
from .estimator import (
    PriorConfig, ScanBundle, SlidingWindow, admit_bundle, marginalize_keyframe, optimize, sync_extract,
    window_pose_sequence,
)
from .deskew import deskew_points
from .geometry import Pose, rot_z
from .imu import ImuSeries, StateEstimate, static_initialization
from .io import Trajectory, parse_imu_log, parse_scan_log, write_tum
from .loop import Keyframe, PoseGraph, RelativePosePrior, ODOM_COV, detect_loop, rebuild_map, verify_loop
from .surfel_map import SurfelMap

log = logging.getLogger(__name__)

TIMING_HEADER = "window_index,t_k,dt_loop_ms,dt_solve_ms,num_factors"


@dataclass
class OdometryResult:
    trajectory: Trajectory
    keyframes: list
    graph: PoseGraph
    smap: SurfelMap
    timing: list = field(default_factory=list)
    loops: int = 0
    seconds: float = 0.0


def load_streams(cfg: RunConfig):
    """Scan log split per lidar, with points moved into the body frame."""
    root = Path(cfg.dataset)
    scans = parse_scan_log(root / "scans.csv")
    imu = parse_imu_log(root / "imu.csv")
    streams = {}
    for lid in np.unique(scans.lidar_id).tolist():
        s = scans.stream(lid)
        E = cfg.extrinsic(lid)
        streams[int(lid)] = PointCloud(s.xyz @ E.R.T + E.p, s.t, s.lidar_id, s.intensity)
    return streams, imu


def _apply_world_delta(x: StateEstimate, R: np.ndarray, c: np.ndarray, dt: np.ndarray) -> StateEstimate:
    """Rotate a state by ``R`` about the point ``c`` and shift it by ``dt``."""
    return StateEstimate(R @ x.R, R @ (x.p - c) + c + dt, R @ x.v, x.bg, x.ba)


def _correct_window(win: SlidingWindow, C: Pose):
    """Left-apply a rigid correction to every window state and the head prior."""
    def fix(x):
        return StateEstimate(C.R @ x.R, C.R @ x.p + C.p, C.R @ x.v, x.bg, x.ba)
    win.states = [fix(x) for x in win.states]
    if win.head_prior is not None:
        win.head_prior = (fix(win.head_prior[0]), win.head_prior[1])


class Odometry:
    """Streaming driver: feed bundles one at a time, read poses back."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.sync = cfg.sync_config()
        self.noise = cfg.imu_noise()
        self.solver = cfg.solver_config()
        self.loop_cfg = cfg.loop_config()
        self.smap = SurfelMap(cfg.map_config())
        self.win = SlidingWindow()
        self.keyframes: list = []
        self.graph = PoseGraph()
        self.outputs: list = []     # (t, keyframe index, relative pose, raw pose)
        self.timing: list = []
        self.loops = 0
        self.last_loop_t = -np.inf
        self.corrected = False
        self.n_windows = 0

    # -- outputs --------------------------------------------------------------------
    def _emit(self, t: float, pose: Pose):
        kf = self.keyframes[-1]
        self.outputs.append((t, kf.id, kf.pose.inverse() @ pose, pose))

    def trajectory(self) -> Trajectory:
        ts, poses = [], []
        for t, kid, rel, raw in self.outputs:
            ts.append(t)
            poses.append(self.keyframes[kid].pose @ rel if self.corrected else raw)
        return Trajectory.from_poses(ts, poses)

    # -- keyframes --------------------------------------------------------------------
    def _add_keyframe_node(self, kf: Keyframe):
        self.graph.add_node(kf.pose)
        if kf.id > 0:
            prev = self.keyframes[kf.id - 1]
            self.graph.add_edge(RelativePosePrior.between(prev.id, kf.id, prev.pose, kf.pose, ODOM_COV))

    def _inject_drift(self, kf: Keyframe):
        """Perturb a new keyframe (and the window) by drift accrued since the last one."""
        cfg = self.cfg
        if kf.id == 0 or (cfg.drift_yaw_rate == 0 and cfg.drift_trans_rate == 0):
            return False
        dt = kf.t - self.keyframes[kf.id - 1].t
        R = rot_z(cfg.drift_yaw_rate * dt)
        shift = np.array([cfg.drift_trans_rate * dt, 0.0, 0.0])
        c = kf.pose.p
        kf.pose = Pose.from_rt(R @ kf.pose.R, kf.pose.p + shift)
        self.win.states = [_apply_world_delta(x, R, c, shift) for x in self.win.states]
        if self.win.head_prior is not None:
            self.win.head_prior = (_apply_world_delta(self.win.head_prior[0], R, c, shift), self.win.head_prior[1])
        return True

    def _first_keyframe(self):
        """The first bundle's deskewed cloud seeds the map."""
        K = self.sync.knots_per_bundle
        seq = window_pose_sequence(self.win, self.noise, 0, K)
        b = self.win.bundles[0]
        x = self.win.states[K]
        cloud = (deskew_points(b.points, seq) - x.p) @ x.R if len(b.points) else np.zeros((0, 3))
        kf = Keyframe(0, x.pose, cloud, self.win.knot_t[K])
        self.keyframes.append(kf)
        self._add_keyframe_node(kf)
        self.smap.insert_cloud(kf.world_cloud(), viewpoint=kf.pose.p)

    def _close_loop(self, kf: Keyframe):
        if kf.t - self.last_loop_t < self.loop_cfg.cooldown:
            return
        cand = detect_loop(self.keyframes[:-1], kf, self.loop_cfg)
        if cand is None:
            return
        edge = verify_loop(self.keyframes, cand, kf, self.loop_cfg)
        if edge is None:
            return
        self.graph.add_edge(edge)
        old = kf.pose
        poses, _ = self.graph.optimize()
        for k, P in zip(self.keyframes, poses):
            k.pose = P
        C = kf.pose @ old.inverse()
        _correct_window(self.win, C)
        self.smap = rebuild_map(self.keyframes, self.cfg.map_config())
        self.loops += 1
        self.last_loop_t = kf.t
        self.corrected = True
        log.info("loop %d -> %d closed at t=%.2f", cand.id, kf.id, kf.t)

    # -- main step --------------------------------------------------------------------
    def step(self, bundle: ScanBundle, x0: StateEstimate | None = None):
        t0 = time.perf_counter()
        first = self.win.n_knots == 0
        admit_bundle(self.win, bundle, self.sync, self.noise, x0, PriorConfig())
        rep = optimize(self.win, self.smap, self.noise, self.solver, depths=list(self.cfg.enabled_depths),
                       per_scale_weight=self.cfg.per_scale_weight)
        if first and not self.keyframes:
            self._first_keyframe()
        if len(self.win.bundles) >= self.sync.window_bundles:
            self._marginalize()
        self.timing.append((self.n_windows, bundle.t_end, (time.perf_counter() - t0) * 1e3,
                            rep.dt_solve * 1e3, rep.num_factors))
        self.n_windows += 1
        if rep.degenerate:
            log.warning("window ending %.3f had no lidar factors", bundle.t_end)

    def _marginalize(self):
        if not self.outputs:
            self.outputs.append((self.win.knot_t[0], 0, self.keyframes[0].pose.inverse() @ self.win.states[0].pose,
                                 self.win.states[0].pose))
        thresholds = (self.cfg.kf_distance, self.cfg.kf_rotation_deg)
        kf, mb = marginalize_keyframe(self.win, self.keyframes, thresholds, self.sync, self.noise, None)
        if kf is not None:
            self._inject_drift(kf)
            self._add_keyframe_node(kf)
            self.smap.insert_cloud(kf.world_cloud(), viewpoint=kf.pose.p)
            self._emit(mb.t, kf.pose)
            if self.cfg.loop_closure:
                self._close_loop(kf)
        else:
            self._emit(mb.t, mb.state.pose)

    def flush(self):
        """Emit the bundle boundaries still inside the window."""
        K = self.sync.knots_per_bundle
        if not self.outputs and self.win.n_knots:
            self.outputs.append((self.win.knot_t[0], 0, self.keyframes[0].pose.inverse() @ self.win.states[0].pose,
                                 self.win.states[0].pose))
        for i in range(K, self.win.n_knots, K):
            self._emit(self.win.knot_t[i], self.win.states[i].pose)


def bundle_times(imu: ImuSeries, period: float):
    k0 = int(np.ceil((imu.t[0] + period) / period - 1e-9))
    k1 = int(np.floor(imu.t[-1] / period + 1e-9))
    return [k * period for k in range(k0, k1 + 1)]


def run_odometry(cfg: RunConfig, streams=None, imu=None) -> OdometryResult:
    t_start = time.perf_counter()
    if streams is None or imu is None:
        streams, imu = load_streams(cfg)
    odo = Odometry(cfg)
    sync = odo.sync
    x0 = static_initialization(imu, cfg.init_duration, odo.noise)
    for t_k in bundle_times(imu, sync.lidar_period):
        b = sync_extract(streams, imu, t_k, sync, cfg.max_points_per_bundle or None)
        if b is None:
            log.warning("no primary sweep ending %.3f; IMU-only bundle", t_k)
            t0 = t_k - sync.lidar_period
            b = ScanBundle(PointCloud.empty(), imu.segment(t0, t_k), t0, t_k, cfg.max_points_per_bundle or None)
        odo.step(b, x0 if odo.win.n_knots == 0 else None)
    odo.flush()
    res = OdometryResult(odo.trajectory(), odo.keyframes, odo.graph, odo.smap, odo.timing, odo.loops,
                         time.perf_counter() - t_start)
    if cfg.output:
        write_outputs(cfg, res)
    return res


def write_outputs(cfg: RunConfig, res: OdometryResult):
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    write_tum(out / "trajectory.txt", res.trajectory)
    rows = [TIMING_HEADER] + [f"{i},{t:.9f},{a:.3f},{b:.3f},{n}" for i, t, a, b, n in res.timing]
    (out / "timing.csv").write_text("\n".join(rows) + "\n")
    cfg.save(out / "config_used.txt")
    if cfg.write_map:
        res.smap.export_ply(out / "map.ply")
    if cfg.loop_closure:
        res.graph.export_g2o(out / "pose_graph.g2o")


__all__ = ["Odometry", "OdometryResult", "TIMING_HEADER", "bundle_times", "load_streams", "run_odometry",
           "write_outputs"]
