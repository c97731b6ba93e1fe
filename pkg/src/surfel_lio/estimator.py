"""Sliding-window continuous-time lidar-inertial estimator.

A window holds ``window_bundles`` scan bundles, each split into
``knots_per_bundle`` intervals. The cost combines one preintegration factor
per interval, one point-to-surfel factor per association coefficient, and a
prior on the head knot. Lidar points are tied to the two knots bracketing
their timestamp through slerp/linear interpolation, so no point is snapped
to a knot.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .deskew import AssociationSet, PointCloud, PtsCoeff, associate, deskew_points
from .geometry import Pose, cross, right_jacobian_inv, right_jacobian_t_apply, so3_log, so3_rotate_exp
from .imu import (
    ImuNoise, ImuSeries, PropagatedPoseSeq, StateEstimate, preint_residual, preint_residuals_batch,
    preintegrate, propagate,
)
from .solver import SolveReport, SolverConfig, SolverDivergence, levenberg_marquardt
from .surfel_map import SurfelMap

log = logging.getLogger(__name__)

STATE_DIM = 15


class DataGapError(ValueError):
    pass


class WindowGapError(ValueError):
    pass


@dataclass(frozen=True)
class SyncConfig:
    primary_lidar_id: int = 0
    lidar_period: float = 0.1
    knots_per_bundle: int = 4
    window_bundles: int = 4
    imu_period: float = 1.0 / 400.0

    def __post_init__(self):
        if not self.lidar_period > 0:
            raise ValueError("lidar_period must be positive")
        if not 2 <= self.knots_per_bundle <= 8:
            raise ValueError("knots_per_bundle must be in [2, 8]")
        if self.window_bundles < 1:
            raise ValueError("window_bundles must be >= 1")

    @property
    def window_span(self) -> float:
        return self.window_bundles * self.lidar_period


@dataclass(frozen=True)
class PriorConfig:
    """Diagonal standard deviations of a 15-dim state prior."""

    rot: float = 1e-3
    pos: float = 1e-3
    vel: float = 1e-2
    gyro_bias: float = 1e-3
    accel_bias: float = 5e-2

    def sigmas(self) -> np.ndarray:
        return np.repeat([self.rot, self.pos, self.vel, self.gyro_bias, self.accel_bias], 3)


@dataclass
class ScanBundle:
    points: PointCloud
    imu: ImuSeries
    t_start: float
    t_end: float
    max_points: int | None = None   # budget for the points used in the solve

    @property
    def solve_points(self) -> PointCloud:
        return self.points.stride_downsample(self.max_points)

    def __post_init__(self):
        if len(self.points) and (self.points.t.min() < self.t_start - 1e-9
                                 or self.points.t.max() >= self.t_end + 1e-9):
            raise ValueError("bundle point outside its interval")


def sync_extract(streams: dict, imu: ImuSeries, t_k: float, cfg: SyncConfig,
                 max_points: int | None = None) -> ScanBundle | None:
    """Merge every stream's points in ``[t_k - period, t_k)`` into one bundle.

    ``max_points`` caps the points used by the solve; the full bundle is kept
    for the map.

    Streams map lidar id to a time-sorted :class:`PointCloud` in the body
    frame. Returns ``None`` (stall) when the primary lidar has no sweep in the
    window or the IMU does not yet reach ``t_k``.
    """
    t0 = t_k - cfg.lidar_period
    primary = streams.get(cfg.primary_lidar_id)
    if primary is None or len(primary) == 0:
        return None
    parts = []
    for lid in sorted(streams):
        c = streams[lid]
        i0 = int(np.searchsorted(c.t, t0 - 1e-9, side="left"))
        i1 = int(np.searchsorted(c.t, t_k - 1e-9, side="left"))
        if lid == cfg.primary_lidar_id and i1 <= i0:
            return None
        parts.append(c.select(slice(i0, i1)))
    if len(imu) == 0 or imu.t[-1] < t_k - 1e-9 or imu.t[0] > t0 + 1e-9:
        return None
    j0 = max(int(np.searchsorted(imu.t, t0, side="right")) - 1, 0)
    j1 = min(int(np.searchsorted(imu.t, t_k, side="left")) + 1, len(imu))
    gaps = np.diff(imu.t[j0:j1])
    if len(gaps) and gaps.max() > 2.0 * cfg.imu_period + 1e-9:
        raise DataGapError(f"IMU gap of {gaps.max() * 1e3:.1f} ms before t={t_k:.3f}")
    pts = PointCloud.concatenate(parts).sorted_by_time()
    return ScanBundle(pts, imu.segment(t0, t_k), t0, t_k, max_points or None)


@dataclass
class SlidingWindow:
    knot_t: list = field(default_factory=list)
    states: list = field(default_factory=list)
    preints: list = field(default_factory=list)
    bundles: list = field(default_factory=list)
    head_prior: tuple | None = None   # (StateEstimate, sigmas)
    assoc: AssociationSet | None = None

    @property
    def n_knots(self) -> int:
        return len(self.knot_t)

    @property
    def n_intervals(self) -> int:
        return len(self.preints)

    def knot_times(self) -> np.ndarray:
        return np.asarray(self.knot_t, dtype=float)

    def points(self) -> PointCloud:
        """Points entering the solve, each bundle thinned to its budget."""
        return PointCloud.concatenate([b.solve_points for b in self.bundles])

    def copy_states(self) -> list:
        return [x.copy() for x in self.states]


def admit_bundle(win: SlidingWindow, bundle: ScanBundle, cfg: SyncConfig, noise: ImuNoise,
                 init_state: StateEstimate | None = None,
                 init_prior: PriorConfig | None = None) -> SlidingWindow:
    """Append ``knots_per_bundle`` IMU-propagated knots spanning the bundle."""
    if win.n_knots == 0:
        if init_state is None:
            raise ValueError("first bundle needs an initial state")
        win.knot_t.append(bundle.t_start)
        win.states.append(init_state.copy())
        win.head_prior = (init_state.copy(), (init_prior or PriorConfig()).sigmas())
    elif abs(bundle.t_start - win.knot_t[-1]) > 1e-9:
        raise WindowGapError(f"bundle starts at {bundle.t_start:.6f}, window ends at {win.knot_t[-1]:.6f}")
    K = cfg.knots_per_bundle
    t_prev = win.knot_t[-1]
    x = win.states[-1]
    for j in range(1, K + 1):
        t = bundle.t_end if j == K else bundle.t_start + j * (bundle.t_end - bundle.t_start) / K
        seg = bundle.imu.segment(t_prev, t)
        win.preints.append(preintegrate(seg, x.bg, x.ba, noise))
        _, x = propagate(x, seg, noise)
        win.knot_t.append(t)
        win.states.append(x)
        t_prev = t
    win.bundles.append(bundle)
    return win


# -- point-to-surfel factor ------------------------------------------------------

def pts_factors(assoc: AssociationSet, R: np.ndarray, p: np.ndarray, sigma: float, jacobians: bool = True):
    """Whitened residuals and 12-column Jacobians of all coefficients.

    ``R`` (M, 3, 3) and ``p`` (M, 3) are knot rotations and positions. Jacobian
    columns are (phi_m, p_m, phi_m+1, p_m+1), with rotations perturbed on the
    right.
    """
    m = assoc.interval
    s = assoc.s
    D_int = np.swapaxes(R[:-1], 1, 2) @ R[1:]
    psi_int = so3_log(D_int)
    psi = psi_int[m]
    spsi = s[:, None] * psi
    Ra = R[m]
    ps = (1.0 - s)[:, None] * p[m] + s[:, None] * p[m + 1]
    Ef = so3_rotate_exp(spsi, assoc.f)
    q = np.einsum("nij,nj->ni", Ra, Ef) + ps
    r = np.einsum("ij,ij->i", assoc.n, q - assoc.mu) / sigma
    if not jacobians:
        return r, None
    Rtn = np.einsum("nji,nj->ni", Ra, assoc.n)
    Rs_t_n = so3_rotate_exp(-spsi, Rtn)
    u = cross(assoc.f, Rs_t_n)
    v1 = right_jacobian_t_apply(spsi, u)
    Jinv_t = np.swapaxes(right_jacobian_inv(psi_int), 1, 2)
    w1 = s[:, None] * np.einsum("nij,nj->ni", Jinv_t[m], v1)
    Ja = so3_rotate_exp(spsi, u) - np.einsum("nij,nj->ni", D_int[m], w1)
    J = np.concatenate([Ja, (1.0 - s)[:, None] * assoc.n, w1, s[:, None] * assoc.n], axis=1) / sigma
    return r, J


def pts_factor_eval(L: PtsCoeff, xm: StateEstimate, xm1: StateEstimate, sigma: float = 0.05):
    """Residual of one coefficient and its Jacobians w.r.t. (R_m, p_m, R_m+1, p_m+1)."""
    a = AssociationSet(L.f[None], L.n[None], L.mu[None], np.array([L.s]), np.zeros(1, np.int64),
                       np.array([L.scale_depth]), np.array([L.weight]), np.zeros(1, np.int64))
    r, J = pts_factors(a, np.stack([xm.R, xm1.R]), np.stack([xm.p, xm1.p]), sigma)
    return float(r[0]), J[0]


def huber_weights(r: np.ndarray, k: float | None):
    """IRLS weights and robust cost terms for whitened residuals."""
    a = np.abs(r)
    if k is None:
        return np.ones_like(r), r * r
    inl = a <= k
    w = np.where(inl, 1.0, k / np.maximum(a, 1e-300))
    rho = np.where(inl, r * r, 2.0 * k * a - k * k)
    return w, rho


# -- cost -------------------------------------------------------------------------

def _prior_residual(x: StateEstimate, prior: StateEstimate, sig: np.ndarray, jac: bool):
    e = so3_log(prior.R.T @ x.R)
    r = np.concatenate([e, x.p - prior.p, x.v - prior.v, x.bg - prior.bg, x.ba - prior.ba]) / sig
    if not jac:
        return r, None
    J = np.eye(STATE_DIM)
    J[0:3, 0:3] = right_jacobian_inv(e)
    return r, J / sig[:, None]


@dataclass
class FactorSet:
    """The window cost: what is summed and how it is weighted."""

    win: SlidingWindow
    assoc: AssociationSet
    noise: ImuNoise
    cfg: SolverConfig
    use_lidar: bool = True

    @property
    def num_factors(self) -> int:
        n = self.win.n_intervals + (len(self.assoc) if self.use_lidar else 0)
        return n + (1 if self.win.head_prior is not None else 0)

    @property
    def num_pts(self) -> int:
        return len(self.assoc) if self.use_lidar else 0

    def _huber_k(self):
        return None if self.cfg.huber is None else self.cfg.huber / self.cfg.sigma_lidar

    def cost(self, states) -> float:
        r = preint_residuals_batch(self.win.preints, states, self.noise)
        c = float(np.sum(r * r))
        if self.win.head_prior is not None:
            r, _ = _prior_residual(states[0], *self.win.head_prior, jac=False)
            c += float(r @ r)
        if self.num_pts:
            R = np.stack([x.R for x in states])
            p = np.stack([x.p for x in states])
            r, _ = pts_factors(self.assoc, R, p, self.cfg.sigma_lidar, jacobians=False)
            _, rho = huber_weights(r, self._huber_k())
            c += float(self.assoc.weight @ rho)
        return c

    def linearize(self, states):
        n = len(states) * STATE_DIM
        H = np.zeros((n, n))
        g = np.zeros(n)
        c = 0.0
        for m, pre in enumerate(self.win.preints):
            r, Jm, Jm1 = preint_residual(pre, states[m], states[m + 1], self.noise)
            J = np.concatenate([Jm, Jm1], axis=1)
            sl = slice(m * STATE_DIM, (m + 2) * STATE_DIM)
            H[sl, sl] += J.T @ J
            g[sl] += J.T @ r
            c += float(r @ r)
        if self.win.head_prior is not None:
            r, J = _prior_residual(states[0], *self.win.head_prior, jac=True)
            H[:STATE_DIM, :STATE_DIM] += J.T @ J
            g[:STATE_DIM] += J.T @ r
            c += float(r @ r)
        if self.num_pts:
            R = np.stack([x.R for x in states])
            p = np.stack([x.p for x in states])
            r, J = pts_factors(self.assoc, R, p, self.cfg.sigma_lidar)
            w, rho = huber_weights(r, self._huber_k())
            w = w * self.assoc.weight
            c += float(self.assoc.weight @ rho)
            m_all = self.assoc.interval
            bounds = np.searchsorted(m_all, np.arange(len(states)))
            for m in range(len(states) - 1):
                a, b = bounds[m], bounds[m + 1]
                if a == b:
                    continue
                Jm, wm, rm = J[a:b], w[a:b], r[a:b]
                idx = np.r_[m * STATE_DIM:m * STATE_DIM + 6, (m + 1) * STATE_DIM:(m + 1) * STATE_DIM + 6]
                Jw = Jm * wm[:, None]
                H[np.ix_(idx, idx)] += Jw.T @ Jm
                g[idx] += Jw.T @ rm
        return H, g, c


def build_cost(win: SlidingWindow, noise: ImuNoise, cfg: SolverConfig,
               assoc: AssociationSet | None = None, use_lidar: bool = True) -> FactorSet:
    assoc = win.assoc if assoc is None else assoc
    if assoc is None:
        assoc = AssociationSet.empty()
    fs = FactorSet(win, assoc, noise, cfg, use_lidar)
    if use_lidar and len(assoc) == 0:
        log.warning("window has no point-to-surfel factors; solving with IMU factors only")
    return fs


def retract_states(states, dx):
    return [x.retract(dx[i * STATE_DIM:(i + 1) * STATE_DIM]) for i, x in enumerate(states)]


# -- optimisation -----------------------------------------------------------------

def window_pose_sequence(win: SlidingWindow, noise: ImuNoise, first: int = 0,
                         last: int | None = None) -> PropagatedPoseSeq:
    """Dense IMU-propagated poses from each knot across its interval."""
    last = win.n_intervals if last is None else last
    seqs = [propagate(win.states[m], win.preints[m].series, noise)[0] for m in range(first, last)]
    return PropagatedPoseSeq.concatenate(seqs)


@dataclass
class OptimizeReport:
    outer_iterations: int = 0
    inner: list = field(default_factory=list)
    num_factors: int = 0
    num_pts: int = 0
    dt_solve: float = 0.0
    dt_total: float = 0.0
    degenerate: bool = False

    @property
    def costs(self) -> list:
        return [c for r in self.inner for c in r.costs]


def relinearize_preints(win: SlidingWindow, threshold: float = 1e-2):
    for m, pre in enumerate(win.preints):
        x = win.states[m]
        if pre.needs_relinearization(x.bg, x.ba, threshold):
            win.preints[m] = pre.relinearized(x.bg, x.ba)


def optimize(win: SlidingWindow, smap: SurfelMap | None, noise: ImuNoise, cfg: SolverConfig,
             depths=None, per_scale_weight: bool = False, use_lidar: bool = True,
             bias_caps=(0.5, 2.0)) -> OptimizeReport:
    """Iterated propagate, deskew, associate and solve over the window."""
    t0 = time.perf_counter()
    rep = OptimizeReport()
    pts = win.points()
    knots = win.knot_times()
    for _ in range(cfg.max_outer):
        rep.outer_iterations += 1
        if use_lidar and smap is not None and not smap.is_empty() and len(pts):
            seq = window_pose_sequence(win, noise)
            win.assoc = associate(pts, seq, smap, knots, depths=depths, per_scale_weight=per_scale_weight)
        else:
            win.assoc = AssociationSet.empty()
        fs = build_cost(win, noise, cfg, use_lidar=use_lidar)
        rep.num_factors, rep.num_pts = fs.num_factors, fs.num_pts
        rep.degenerate = use_lidar and fs.num_pts == 0
        before = np.stack([x.p for x in win.states])
        ts = time.perf_counter()
        try:
            states, inner = levenberg_marquardt(win.states, fs.linearize, fs.cost, retract_states, cfg)
        finally:
            rep.dt_solve += time.perf_counter() - ts
        rep.inner.append(inner)
        win.states = [x.clamp_biases(*bias_caps) for x in states]
        relinearize_preints(win)
        moved = np.abs(np.stack([x.p for x in win.states]) - before).max()
        if moved < cfg.outer_tol:
            break
    rep.dt_total = time.perf_counter() - t0
    return rep


# -- marginalisation --------------------------------------------------------------

@dataclass
class MarginalizedBundle:
    bundle: ScanBundle
    t: float
    state: StateEstimate
    cloud: np.ndarray   # deskewed points in the body frame at ``t``
    knot_times: np.ndarray
    knot_states: list


def slide_window(win: SlidingWindow, cfg: SyncConfig, noise: ImuNoise,
                 head_prior: PriorConfig | None = None) -> MarginalizedBundle:
    """Drop the oldest bundle and its knots; the new head keeps a weak prior.

    The dropped bundle's cloud is deskewed with the propagated poses and
    expressed in the body frame of the knot that ends the bundle, which is the
    pose a keyframe made from it would carry.
    """
    K = cfg.knots_per_bundle
    bundle = win.bundles[0]
    seq = window_pose_sequence(win, noise, 0, K)
    head = win.states[K]
    cloud = np.zeros((0, 3))
    if len(bundle.points):
        world = deskew_points(bundle.points, seq)
        cloud = (world - head.p) @ head.R
    out = MarginalizedBundle(bundle, win.knot_t[K], head.copy(), cloud,
                             np.asarray(win.knot_t[:K + 1]), [x.copy() for x in win.states[:K + 1]])
    del win.knot_t[:K]
    del win.states[:K]
    del win.preints[:K]
    del win.bundles[0]
    win.assoc = None
    win.head_prior = (win.states[0].copy(), (head_prior or PriorConfig(1e-2, 1e-2, 5e-2, 1e-3, 1e-2)).sigmas())
    return out


def keyframe_admissible(pose: Pose, existing: list, dist_thresh: float, rot_thresh_deg: float,
                        k: int = 5) -> bool:
    """A pose becomes a keyframe when it is far, in distance or rotation, from
    each of its ``k`` nearest existing keyframes."""
    if not existing:
        return True
    P = np.array([e.p for e in existing])
    d = np.linalg.norm(P - pose.p, axis=1)
    order = np.argsort(d, kind="stable")[:k]
    th = np.radians(rot_thresh_deg)
    for i in order:
        rot = np.linalg.norm(so3_log(existing[i].R.T @ pose.R))
        if not (d[i] > dist_thresh or rot > th):
            return False
    return True


def marginalize_keyframe(win: SlidingWindow, keyframes: list, thresholds, cfg: SyncConfig,
                         noise: ImuNoise, smap: SurfelMap | None = None):
    """Slide the window and, if the dropped pose qualifies, make it a keyframe.

    Returns ``(keyframe or None, marginalized bundle)``; an admitted keyframe's
    cloud is inserted into ``smap``.
    """
    from .loop import Keyframe
    mb = slide_window(win, cfg, noise)
    pose = mb.state.pose
    dist, rot = thresholds
    if len(mb.cloud) and keyframe_admissible(pose, [kf.pose for kf in keyframes], dist, rot):
        kf = Keyframe(len(keyframes), pose, mb.cloud, mb.t)
        keyframes.append(kf)
        if smap is not None:
            smap.insert_cloud(kf.world_cloud(), viewpoint=pose.p)
        return kf, mb
    return None, mb


__all__ = [
    "DataGapError", "FactorSet", "MarginalizedBundle", "OptimizeReport", "PriorConfig", "ScanBundle",
    "SlidingWindow", "SolveReport", "SolverConfig", "SolverDivergence", "SyncConfig", "WindowGapError",
    "admit_bundle", "build_cost", "huber_weights", "keyframe_admissible", "marginalize_keyframe",
    "optimize", "pts_factor_eval", "pts_factors", "retract_states", "slide_window", "sync_extract",
    "window_pose_sequence",
]
