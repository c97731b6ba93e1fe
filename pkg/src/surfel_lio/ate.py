"""Absolute trajectory error between time-matched trajectories."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose
from .io import Trajectory


class NoOverlapError(ValueError):
    pass


@dataclass
class AteReport:
    rmse: float
    mean: float
    median: float
    max: float
    rmse_xyz: np.ndarray
    alignment: Pose
    matched: int

    def summary(self) -> str:
        x, y, z = self.rmse_xyz
        return (f"ATE rmse={self.rmse:.6f} m mean={self.mean:.6f} median={self.median:.6f} "
                f"max={self.max:.6f} rmse_xyz=({x:.6f},{y:.6f},{z:.6f}) matched={self.matched}")


def match_timestamps(t_gt: np.ndarray, t_est: np.ndarray, tol: float = 0.01):
    """Index pairs (gt, est) of nearest ground-truth stamps within ``tol``."""
    if len(t_gt) == 0 or len(t_est) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    j = np.searchsorted(t_gt, t_est)
    lo = np.clip(j - 1, 0, len(t_gt) - 1)
    hi = np.clip(j, 0, len(t_gt) - 1)
    pick = np.where(np.abs(t_gt[lo] - t_est) <= np.abs(t_gt[hi] - t_est), lo, hi)
    ok = np.abs(t_gt[pick] - t_est) <= tol + 1e-12
    return pick[ok], np.nonzero(ok)[0]


def rigid_alignment(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rotation and translation taking ``src`` onto ``dst``."""
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    H = (src - ms).T @ (dst - md)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return Pose.from_rt(R, md - R @ ms)


def evaluate_ate(gt: Trajectory, est: Trajectory, align: str = "rigid", tol: float = 0.01) -> AteReport:
    if align not in ("none", "rigid"):
        raise ValueError("align must be 'none' or 'rigid'")
    ig, ie = match_timestamps(gt.t, est.t, tol)
    if len(ig) == 0:
        raise NoOverlapError("no estimated timestamp lies within tolerance of the ground truth")
    P, Q = est.p[ie], gt.p[ig]
    T = Pose.identity()
    if align == "rigid" and len(ig) >= 3:
        T = rigid_alignment(P, Q)
    elif align == "rigid":
        T = Pose.from_rt(np.eye(3), (Q - P).mean(axis=0))
    err = Q - (P @ T.R.T + T.p)
    d = np.linalg.norm(err, axis=1)
    return AteReport(float(np.sqrt(np.mean(d * d))), float(d.mean()), float(np.median(d)), float(d.max()),
                     np.sqrt(np.mean(err * err, axis=0)), T, len(ig))


__all__ = ["AteReport", "NoOverlapError", "evaluate_ate", "match_timestamps", "rigid_alignment"]
