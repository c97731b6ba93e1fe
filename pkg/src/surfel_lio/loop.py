"""Keyframes, loop detection by ICP and pose-graph optimisation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, matrix_to_quat, right_jacobian_inv, skew, so3_exp, so3_log
from .solver import SolverConfig, levenberg_marquardt
from .surfel_map import MapConfig, SurfelMap

log = logging.getLogger(__name__)


@dataclass
class Keyframe:
    id: int
    pose: Pose
    cloud: np.ndarray   # deskewed points in the keyframe body frame
    t: float

    def world_cloud(self, pose: Pose | None = None) -> np.ndarray:
        T = self.pose if pose is None else pose
        return self.cloud @ T.R.T + T.p


@dataclass
class RelativePosePrior:
    """Measured pose of keyframe ``j`` in the frame of keyframe ``i``."""

    i: int
    j: int
    R: np.ndarray
    p: np.ndarray
    cov: np.ndarray
    kind: str = "odometry"

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)
        self.p = np.asarray(self.p, dtype=float).reshape(3)
        self.cov = np.asarray(self.cov, dtype=float).reshape(6, 6)
        if self.i == self.j:
            raise ValueError("an edge must join two distinct keyframes")
        self._W = np.linalg.inv(np.linalg.cholesky(self.cov))

    @property
    def sqrt_info(self) -> np.ndarray:
        return self._W

    @classmethod
    def between(cls, i: int, j: int, Ti: Pose, Tj: Pose, cov, kind: str = "odometry"):
        rel = Ti.inverse() @ Tj
        return cls(i, j, rel.R, rel.p, cov, kind)


ODOM_COV = np.diag([1e-4] * 3 + [1e-3] * 3)


def pose_graph_residual(edge: RelativePosePrior, Ri, pi, Rj, pj, whiten: bool = True, jacobians: bool = True):
    """Residual of one edge and its Jacobians w.r.t. (phi_i, p_i) and (phi_j, p_j).

    Rotations are perturbed on the right, positions additively.
    """
    E = edge.R.T @ Ri.T @ Rj
    e = so3_log(E)
    d = Ri.T @ (pj - pi)
    r = np.concatenate([e, edge.R.T @ (d - edge.p)])
    if not jacobians:
        return (edge.sqrt_info @ r if whiten else r), None, None
    Jinv = right_jacobian_inv(e)
    Ji = np.zeros((6, 6))
    Jj = np.zeros((6, 6))
    Ji[0:3, 0:3] = -Jinv @ Rj.T @ Ri
    Jj[0:3, 0:3] = Jinv
    Ji[3:6, 0:3] = edge.R.T @ skew(d)
    Ji[3:6, 3:6] = -edge.R.T @ Ri.T
    Jj[3:6, 3:6] = edge.R.T @ Ri.T
    if whiten:
        W = edge.sqrt_info
        return W @ r, W @ Ji, W @ Jj
    return r, Ji, Jj


def _retract_poses(poses, dx):
    out = []
    for k, (R, p) in enumerate(poses):
        d = dx[6 * k:6 * k + 6]
        out.append((R @ so3_exp(d[:3]), p + d[3:]))
    return out


@dataclass
class PoseGraph:
    poses: list = field(default_factory=list)   # list of Pose
    edges: list = field(default_factory=list)

    def add_node(self, pose: Pose) -> int:
        self.poses.append(pose)
        return len(self.poses) - 1

    def add_edge(self, edge: RelativePosePrior):
        n = len(self.poses)
        if not (0 <= edge.i < n and 0 <= edge.j < n):
            raise IndexError("edge refers to an unknown node")
        self.edges.append(edge)

    @property
    def loop_edges(self) -> list:
        return [e for e in self.edges if e.kind == "loop"]

    def _cost(self, x) -> float:
        c = 0.0
        for e in self.edges:
            r, _, _ = pose_graph_residual(e, *x[e.i], *x[e.j], jacobians=False)
            c += float(r @ r)
        return c

    def _linearize(self, x):
        n = 6 * len(x)
        H = np.zeros((n, n))
        g = np.zeros(n)
        c = 0.0
        for e in self.edges:
            r, Ji, Jj = pose_graph_residual(e, *x[e.i], *x[e.j])
            si, sj = slice(6 * e.i, 6 * e.i + 6), slice(6 * e.j, 6 * e.j + 6)
            H[si, si] += Ji.T @ Ji
            H[sj, sj] += Jj.T @ Jj
            H[si, sj] += Ji.T @ Jj
            H[sj, si] += Jj.T @ Ji
            g[si] += Ji.T @ r
            g[sj] += Jj.T @ r
            c += float(r @ r)
        return H, g, c

    def optimize(self, max_iter: int = 30, cfg: SolverConfig | None = None):
        """Least-squares poses with the first node held fixed."""
        if len(self.poses) < 2 or not self.edges:
            return list(self.poses), None
        cfg = cfg or SolverConfig(cost_tol=1e-12, max_rejections=8)
        x0 = [(P.R, P.p) for P in self.poses]
        free = np.arange(6, 6 * len(x0))
        x, rep = levenberg_marquardt(x0, self._linearize, self._cost, _retract_poses, cfg, free=free,
                                     max_iter=max_iter)
        self.poses = [Pose.from_rt(R, p) for R, p in x]
        return list(self.poses), rep

    def export_g2o(self, path):
        lines = []
        for k, P in enumerate(self.poses):
            w, qx, qy, qz = matrix_to_quat(P.R)
            lines.append(f"VERTEX_SE3:QUAT {k} " + " ".join(f"{v:.9f}" for v in (*P.p, qx, qy, qz, w)))
        lines.append("FIX 0")
        for e in self.edges:
            w, qx, qy, qz = matrix_to_quat(e.R)
            info = np.linalg.inv(e.cov)
            # g2o orders the tangent as (translation, rotation)
            perm = np.r_[3:6, 0:3]
            info = info[np.ix_(perm, perm)]
            upper = [info[a, b] for a in range(6) for b in range(a, 6)]
            vals = " ".join(f"{v:.9f}" for v in (*e.p, qx, qy, qz, w))
            lines.append(f"EDGE_SE3:QUAT {e.i} {e.j} {vals} " + " ".join(f"{v:.9g}" for v in upper))
        Path(path).write_text("\n".join(lines) + "\n")


# -- loop detection ------------------------------------------------------------

@dataclass(frozen=True)
class LoopConfig:
    num_candidates: int = 10
    min_time_gap: float = 30.0     # seconds
    max_distance: float = 2.0      # metres between candidate positions
    max_fitness: float = 0.3       # metres, RMS point-to-plane after ICP
    icp_iterations: int = 30
    icp_max_corr: float = 1.0
    submap_radius: int = 0         # neighbouring keyframes merged into the target
    max_points: int = 2000
    cooldown: float = 5.0          # seconds between accepted loops


def detect_loop(keyframes: list, query: Keyframe, cfg: LoopConfig = LoopConfig()):
    """Nearest keyframe among the ``num_candidates`` nearest that is far enough back in time."""
    if not keyframes:
        return None
    P = np.array([kf.pose.p for kf in keyframes])
    d = np.linalg.norm(P - query.pose.p, axis=1)
    near = np.argsort(d, kind="stable")[:cfg.num_candidates]
    ok = [i for i in near if d[i] <= cfg.max_distance and query.t - keyframes[i].t >= cfg.min_time_gap]
    if not ok:
        return None
    return keyframes[ok[0]]


def estimate_normals(points: np.ndarray, k: int = 10) -> np.ndarray:
    tree = cKDTree(points)
    _, idx = tree.query(points, k=min(k, len(points)))
    nb = points[idx]
    c = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", c, c)
    _, vec = np.linalg.eigh(cov)
    return vec[:, :, 0]


@dataclass
class IcpResult:
    T: Pose
    fitness: float
    inliers: int
    converged: bool


def icp_point_to_plane(source: np.ndarray, target: np.ndarray, T0: Pose, iterations: int = 30,
                       max_corr: float = 1.0, target_normals: np.ndarray | None = None) -> IcpResult:
    """Pose mapping ``source`` onto ``target`` by point-to-plane ICP."""
    normals = estimate_normals(target) if target_normals is None else target_normals
    tree = cKDTree(target)
    R, p = T0.R.copy(), T0.p.copy()
    fit, n_in, converged = np.inf, 0, False
    for _ in range(iterations):
        q = source @ R.T + p
        dist, idx = tree.query(q, distance_upper_bound=max_corr)
        m = np.isfinite(dist)
        n_in = int(m.sum())
        if n_in < 6:
            break
        qs, nt, tt = q[m], normals[idx[m]], target[idx[m]]
        e = np.einsum("ij,ij->i", nt, qs - tt)
        fit = float(np.sqrt(np.mean(e * e)))
        # world-frame left perturbation: q' = q + w x q + t
        A = np.concatenate([np.cross(qs, nt), nt], axis=1)
        dx = np.linalg.lstsq(A, -e, rcond=None)[0]
        dR = so3_exp(dx[:3])
        R, p = dR @ R, dR @ p + dx[3:]
        if np.linalg.norm(dx) < 1e-7:
            converged = True
            break
    q = source @ R.T + p
    dist, idx = tree.query(q, distance_upper_bound=max_corr)
    m = np.isfinite(dist)
    if m.sum() >= 6:
        e = np.einsum("ij,ij->i", normals[idx[m]], q[m] - target[idx[m]])
        fit, n_in = float(np.sqrt(np.mean(e * e))), int(m.sum())
    return IcpResult(Pose.from_rt(R, p), fit, n_in, converged)


def _subsample(points: np.ndarray, n: int) -> np.ndarray:
    if len(points) <= n:
        return points
    return points[np.linspace(0, len(points) - 1, n).astype(np.int64)]


def verify_loop(keyframes: list, cand: Keyframe, query: Keyframe, cfg: LoopConfig = LoopConfig()):
    """ICP-verified relative pose edge from ``cand`` to ``query`` or ``None``."""
    lo, hi = max(cand.id - cfg.submap_radius, 0), min(cand.id + cfg.submap_radius + 1, len(keyframes))
    inv = cand.pose.inverse()
    near = [keyframes[k] for k in range(lo, hi) if query.t - keyframes[k].t >= 0.5 * cfg.min_time_gap]
    if not near:
        return None
    target = np.concatenate([inv.transform(kf.world_cloud()) for kf in near])
    target = _subsample(target, 4 * cfg.max_points)
    source = _subsample(query.cloud, cfg.max_points)
    if len(target) < 20 or len(source) < 20:
        return None
    normals = estimate_normals(target)
    res = icp_point_to_plane(source, target, inv @ query.pose, cfg.icp_iterations, cfg.icp_max_corr, normals)
    # refine with a tighter gate once coarsely aligned
    res = icp_point_to_plane(source, target, res.T, cfg.icp_iterations, 0.5 * cfg.icp_max_corr, normals)
    if not res.fitness <= cfg.max_fitness or res.inliers < 0.5 * len(source):
        log.info("loop %d->%d rejected, fitness %.3f", cand.id, query.id, res.fitness)
        return None
    cov = np.eye(6) * 0.01 * max(res.fitness, 1e-3)
    return RelativePosePrior(cand.id, query.id, res.T.R, res.T.p, cov, kind="loop")


def build_pose_graph(keyframes: list, loop_edges=(), odom_cov=ODOM_COV) -> PoseGraph:
    g = PoseGraph()
    for kf in keyframes:
        g.add_node(kf.pose)
    for a, b in zip(keyframes[:-1], keyframes[1:]):
        g.add_edge(RelativePosePrior.between(a.id, b.id, a.pose, b.pose, odom_cov))
    for e in loop_edges:
        g.add_edge(e)
    return g


def rebuild_map(keyframes: list, config: MapConfig | None = None) -> SurfelMap:
    smap = SurfelMap(config)
    for kf in keyframes:
        if len(kf.cloud):
            smap.insert_cloud(kf.world_cloud(), viewpoint=kf.pose.p)
    return smap


__all__ = [
    "IcpResult", "Keyframe", "LoopConfig", "ODOM_COV", "PoseGraph", "RelativePosePrior", "build_pose_graph",
    "detect_loop", "estimate_normals", "icp_point_to_plane", "pose_graph_residual", "rebuild_map",
    "verify_loop",
]
