"""Dataset file formats: CSV sensor logs, TUM trajectories and key=value files."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Pose, matrix_to_quat, quat_to_matrix

SCAN_HEADER = "t,lidar_id,x,y,z,intensity"
IMU_HEADER = "t,wx,wy,wz,ax,ay,az"


class ParseError(ValueError):
    pass


def _load_csv(path, header: str) -> np.ndarray:
    """Strict CSV loader; errors name the offending line."""
    path = Path(path)
    ncol = header.count(",") + 1
    with open(path) as fh:
        first = fh.readline().strip()
    if first != header:
        raise ParseError(f"{path}:1: expected header '{header}', got '{first}'")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)   # header-only file
            data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=float)
    except ValueError:
        data = None
    if data is not None and data.size == 0:
        return np.zeros((0, ncol))
    if data is None or data.shape[1] != ncol or not np.all(np.isfinite(data)):
        _locate_bad_line(path, ncol)
        raise ParseError(f"{path}: malformed content")
    return data


def _locate_bad_line(path: Path, ncol: int):
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if lineno == 1:
                continue
            parts = line.strip().split(",")
            if len(parts) != ncol:
                raise ParseError(f"{path}:{lineno}: expected {ncol} fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric field") from None
            if not all(np.isfinite(vals)):
                raise ParseError(f"{path}:{lineno}: non-finite value")


def _first_backwards(t: np.ndarray, strict: bool) -> int | None:
    d = np.diff(t)
    bad = np.nonzero(d <= 0 if strict else d < 0)[0]
    return int(bad[0]) + 1 if len(bad) else None


# -- scan log ----------------------------------------------------------------

@dataclass
class ScanLog:
    """Raw lidar returns in each sensor's own frame."""

    t: np.ndarray
    lidar_id: np.ndarray
    xyz: np.ndarray
    intensity: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    def stream(self, lidar_id: int) -> "ScanLog":
        m = self.lidar_id == lidar_id
        return ScanLog(self.t[m], self.lidar_id[m], self.xyz[m], self.intensity[m])


def write_scan_log(path, log: ScanLog):
    rows = np.column_stack([log.t, log.lidar_id, log.xyz, log.intensity])
    np.savetxt(path, rows, fmt=["%.9f", "%d", "%.9f", "%.9f", "%.9f", "%.3f"], delimiter=",",
               header=SCAN_HEADER, comments="")


def parse_scan_log(path) -> ScanLog:
    data = _load_csv(path, SCAN_HEADER)
    lid = data[:, 1]
    if np.any(lid != np.round(lid)):
        bad = int(np.nonzero(lid != np.round(lid))[0][0])
        raise ParseError(f"{path}:{bad + 2}: lidar_id must be an integer")
    lid = lid.astype(np.int64)
    for sid in np.unique(lid):
        idx = np.nonzero(lid == sid)[0]
        j = _first_backwards(data[idx, 0], strict=False)
        if j is not None:
            raise ParseError(f"{path}:{idx[j] + 2}: non-monotonic time in lidar {sid} stream")
    return ScanLog(data[:, 0].copy(), lid, data[:, 2:5].copy(), data[:, 5].copy())


# -- IMU log -----------------------------------------------------------------

def write_imu_log(path, t, gyro, acc):
    rows = np.column_stack([t, gyro, acc])
    np.savetxt(path, rows, fmt="%.9f", delimiter=",", header=IMU_HEADER, comments="")


def parse_imu_log(path):
    from .imu import ImuSeries
    data = _load_csv(path, IMU_HEADER)
    j = _first_backwards(data[:, 0], strict=True)
    if j is not None:
        raise ParseError(f"{path}:{j + 2}: non-monotonic IMU time")
    return ImuSeries(data[:, 0].copy(), data[:, 1:4].copy(), data[:, 4:7].copy())


# -- TUM trajectories --------------------------------------------------------

@dataclass
class Trajectory:
    t: np.ndarray
    p: np.ndarray
    R: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def from_poses(cls, t, poses) -> "Trajectory":
        poses = list(poses)
        return cls(np.asarray(t, float), np.array([P.p for P in poses]).reshape(-1, 3),
                   np.array([P.R for P in poses]).reshape(-1, 3, 3))

    def pose(self, i: int) -> Pose:
        return Pose.from_rt(self.R[i], self.p[i])


def format_tum(traj: Trajectory) -> str:
    q = matrix_to_quat(traj.R) if len(traj) else np.zeros((0, 4))
    lines = []
    for t, p, qi in zip(traj.t, traj.p, q):
        w, x, y, z = qi
        vals = (t, p[0], p[1], p[2], x, y, z, w)
        lines.append(" ".join(f"{v:.9f}" for v in vals))
    return "\n".join(lines) + ("\n" if lines else "")


def write_tum(path, traj: Trajectory):
    Path(path).write_text(format_tum(traj))


def read_tum(path) -> Trajectory:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 8:
                raise ParseError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric field") from None
    data = np.array(rows, dtype=float).reshape(-1, 8)
    j = _first_backwards(data[:, 0], strict=True)
    if j is not None:
        raise ParseError(f"{path}: timestamps not strictly increasing at pose {j}")
    quat = data[:, [7, 4, 5, 6]]
    norms = np.linalg.norm(quat, axis=1)
    if np.any(np.abs(norms - 1) > 1e-6):
        bad = int(np.nonzero(np.abs(norms - 1) > 1e-6)[0][0])
        raise ParseError(f"{path}: quaternion of pose {bad} is not unit norm")
    R = quat_to_matrix(quat / norms[:, None]) if len(data) else np.zeros((0, 3, 3))
    return Trajectory(data[:, 0].copy(), data[:, 1:4].copy(), R)


# -- key=value ---------------------------------------------------------------

def read_kv(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            if "=" not in s:
                raise ParseError(f"{path}:{lineno}: expected key=value")
            k, v = (x.strip() for x in s.split("=", 1))
            if not k:
                raise ParseError(f"{path}:{lineno}: empty key")
            if k in out:
                raise ParseError(f"{path}:{lineno}: duplicate key '{k}'")
            out[k] = v
    return out


def write_kv(path, items: dict):
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in items.items()))
