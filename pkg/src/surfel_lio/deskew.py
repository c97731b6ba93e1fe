"""Motion compensation of lidar points and point-to-surfel association."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import so3_log, so3_rotate_exp
from .imu import PropagatedPoseSeq
from .surfel_map import SurfelMap

_EDGE = 1e-9


class OutOfCoverage(ValueError):
    pass


@dataclass(frozen=True)
class RawPoint:
    f_body: np.ndarray
    t_s: float
    lidar_id: int = 0
    intensity: float = 0.0


@dataclass
class PointCloud:
    """Struct-of-arrays point buffer, body frame at each point's sample time."""

    f: np.ndarray
    t: np.ndarray
    lidar_id: np.ndarray | None = None
    intensity: np.ndarray | None = None

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=float).reshape(-1, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        n = len(self.t)
        if len(self.f) != n:
            raise ValueError("point and timestamp arrays differ in length")
        self.lidar_id = (np.zeros(n, np.int64) if self.lidar_id is None
                         else np.asarray(self.lidar_id, dtype=np.int64).reshape(-1))
        self.intensity = (np.zeros(n) if self.intensity is None
                          else np.asarray(self.intensity, dtype=float).reshape(-1))

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0))

    @classmethod
    def from_points(cls, points: Sequence[RawPoint]) -> "PointCloud":
        if not points:
            return cls.empty()
        return cls([p.f_body for p in points], [p.t_s for p in points],
                   [p.lidar_id for p in points], [p.intensity for p in points])

    @classmethod
    def concatenate(cls, clouds: Sequence["PointCloud"]) -> "PointCloud":
        clouds = [c for c in clouds if len(c)]
        if not clouds:
            return cls.empty()
        return cls(np.concatenate([c.f for c in clouds]), np.concatenate([c.t for c in clouds]),
                   np.concatenate([c.lidar_id for c in clouds]),
                   np.concatenate([c.intensity for c in clouds]))

    def __len__(self) -> int:
        return len(self.t)

    def select(self, idx) -> "PointCloud":
        return PointCloud(self.f[idx], self.t[idx], self.lidar_id[idx], self.intensity[idx])

    def sorted_by_time(self) -> "PointCloud":
        return self.select(np.argsort(self.t, kind="stable"))

    def points(self) -> list[RawPoint]:
        return [RawPoint(f.copy(), float(t), int(i), float(c))
                for f, t, i, c in zip(self.f, self.t, self.lidar_id, self.intensity)]

    def stride_downsample(self, max_points: int | None) -> "PointCloud":
        """Keep every k-th point so that at most ``max_points`` remain."""
        n = len(self)
        if not max_points or n <= max_points:
            return self
        k = -(-n // max_points)
        return self.select(np.arange(0, n, k))


@dataclass(frozen=True)
class PtsCoeff:
    f: np.ndarray
    n: np.ndarray
    mu: np.ndarray
    s: float
    interval_index: int
    scale_depth: int
    weight: float = 1.0


@dataclass
class AssociationSet:
    """Flat arrays of point-to-surfel coefficients, sorted by interval."""

    f: np.ndarray
    n: np.ndarray
    mu: np.ndarray
    s: np.ndarray
    interval: np.ndarray
    depth: np.ndarray
    weight: np.ndarray
    point_index: np.ndarray
    dropped: int = 0

    @classmethod
    def empty(cls, dropped: int = 0) -> "AssociationSet":
        z3 = np.zeros((0, 3))
        zi = np.zeros(0, np.int64)
        return cls(z3, z3.copy(), z3.copy(), np.zeros(0), zi, zi.copy(), np.zeros(0), zi.copy(), dropped)

    @classmethod
    def concatenate(cls, sets: Sequence["AssociationSet"]) -> "AssociationSet":
        sets = list(sets)
        if not sets:
            return cls.empty()
        out = cls(*(np.concatenate([getattr(a, k) for a in sets])
                    for k in ("f", "n", "mu", "s", "interval", "depth", "weight", "point_index")),
                  dropped=sum(a.dropped for a in sets))
        order = np.argsort(out.interval, kind="stable")
        return out.select(order)

    def __len__(self) -> int:
        return len(self.s)

    def select(self, idx) -> "AssociationSet":
        return AssociationSet(self.f[idx], self.n[idx], self.mu[idx], self.s[idx], self.interval[idx],
                              self.depth[idx], self.weight[idx], self.point_index[idx], self.dropped)

    def bucket(self, m: int) -> list[PtsCoeff]:
        idx = np.nonzero(self.interval == m)[0]
        return [PtsCoeff(self.f[i], self.n[i], self.mu[i], float(self.s[i]), int(self.interval[i]),
                         int(self.depth[i]), float(self.weight[i])) for i in idx]

    def buckets(self) -> dict[int, list[PtsCoeff]]:
        return {int(m): self.bucket(int(m)) for m in np.unique(self.interval)}


def _brackets(t_poses: np.ndarray, ts: np.ndarray):
    """Bracket index and fraction for each query time; raises if uncovered."""
    if len(t_poses) == 0:
        raise OutOfCoverage("empty pose sequence")
    if np.any(ts < t_poses[0] - _EDGE) or np.any(ts > t_poses[-1] + _EDGE):
        raise OutOfCoverage("timestamp outside propagated pose coverage")
    if len(t_poses) == 1:
        return np.zeros(len(ts), np.int64), np.zeros(len(ts))
    a = np.searchsorted(t_poses, ts, side="right") - 1
    a = np.clip(a, 0, len(t_poses) - 2)
    s = (ts - t_poses[a]) / (t_poses[a + 1] - t_poses[a])
    return a, np.clip(s, 0.0, 1.0)


def coverage_mask(points: PointCloud, poses: PropagatedPoseSeq) -> np.ndarray:
    if len(poses) == 0:
        return np.zeros(len(points), bool)
    return (points.t >= poses.t[0] - _EDGE) & (points.t <= poses.t[-1] + _EDGE)


def deskew_points(points: PointCloud, poses: PropagatedPoseSeq) -> np.ndarray:
    """World coordinates of every point using interpolated propagated poses."""
    a, s = _brackets(poses.t, points.t)
    if len(poses) == 1:
        return points.f @ poses.R[0].T + poses.p[0]
    Ra = poses.R[a]
    psi = so3_log(np.swapaxes(poses.R[:-1], 1, 2) @ poses.R[1:])[a]
    local = so3_rotate_exp(s[:, None] * psi, points.f)
    world = np.einsum("nij,nj->ni", Ra, local)
    return world + (1.0 - s)[:, None] * poses.p[a] + s[:, None] * poses.p[a + 1]


def knot_fraction(ts: np.ndarray, knot_times: np.ndarray):
    """Interval index m and fraction (t - t_m)/(t_{m+1} - t_m)."""
    knot_times = np.asarray(knot_times, dtype=float)
    m = np.clip(np.searchsorted(knot_times, ts, side="right") - 1, 0, len(knot_times) - 2)
    s = (ts - knot_times[m]) / (knot_times[m + 1] - knot_times[m])
    return m, np.clip(s, 0.0, 1.0)


def deskew_point(p: RawPoint, poses: PropagatedPoseSeq, t_m: float | None = None,
                 t_m1: float | None = None):
    """World coordinates of one point and its knot-interval fraction."""
    cloud = PointCloud(np.asarray(p.f_body, float)[None], [p.t_s])
    world = deskew_points(cloud, poses)[0]
    t_m = poses.t[0] if t_m is None else t_m
    t_m1 = poses.t[-1] if t_m1 is None else t_m1
    return world, float((p.t_s - t_m) / (t_m1 - t_m))


def deskew_to_frame_end(points, poses: PropagatedPoseSeq) -> np.ndarray:
    """Deskewed points expressed in the body frame at the last pose time."""
    cloud = points if isinstance(points, PointCloud) else PointCloud.from_points(points)
    world = deskew_points(cloud, poses)
    return (world - poses.p[-1]) @ poses.R[-1]


def associate(points, poses: PropagatedPoseSeq, smap: SurfelMap, knot_times=None,
              depths: Sequence[int] | None = None, max_plane_dist: float | None = None,
              per_scale_weight: bool = False) -> AssociationSet:
    """Two-stage point-to-surfel association.

    Stage one is the map's candidate query around each deskewed point; stage
    two keeps a candidate when the point lies within ``max_plane_dist`` of its
    plane. Points outside the pose coverage are dropped and counted.
    """
    cloud = points if isinstance(points, PointCloud) else PointCloud.from_points(points)
    cover = coverage_mask(cloud, poses)
    dropped = int(len(cloud) - cover.sum())
    if smap.is_empty() or not cover.any():
        return AssociationSet.empty(dropped)
    keep = np.nonzero(cover)[0]
    sub = cloud.select(keep)
    world = deskew_points(sub, poses)
    cand = smap.query_batch(world, depths)
    if len(cand) == 0:
        return AssociationSet.empty(dropped)
    d_max = smap.config.max_plane_dist if max_plane_dist is None else max_plane_dist
    pi = cand.point_index
    d = np.einsum("ij,ij->i", cand.normal, world[pi] - cand.mean)
    ok = np.abs(d) < d_max
    pi = pi[ok]
    if knot_times is None:
        knot_times = np.array([poses.t[0], poses.t[-1]])
    m, s = knot_fraction(sub.t[pi], knot_times)
    if per_scale_weight:
        counts = np.bincount(pi, minlength=len(sub))
        weight = 1.0 / counts[pi]
    else:
        weight = np.ones(len(pi))
    out = AssociationSet(sub.f[pi], cand.normal[ok], cand.mean[ok], s, m, cand.depth[ok], weight,
                         keep[pi], dropped)
    return out.select(np.argsort(m, kind="stable"))


__all__ = [
    "AssociationSet", "OutOfCoverage", "PointCloud", "PtsCoeff", "RawPoint", "associate",
    "coverage_mask", "deskew_point", "deskew_points", "deskew_to_frame_end", "knot_fraction",
]
