"""Independent oracles shared by several test modules."""
import numpy as np

from surfel_lio.surfel_map import MapConfig, NodeKey, SurfelMap, SurfelStats, leaf_indices


def batch_node_stats(points, cfg: MapConfig) -> dict:
    """Group raw points per node key and compute two-pass moments."""
    pts = np.asarray(points, float)
    leaf = leaf_indices(pts, cfg.leaf_size)
    out = {}
    for d in range(cfg.max_depth + 1):
        groups: dict = {}
        for i, ijk in enumerate(map(tuple, (leaf >> d).tolist())):
            groups.setdefault(ijk, []).append(i)
        for ijk, idx in groups.items():
            out[NodeKey(d, *ijk)] = SurfelStats.from_points(pts[idx])
    return out


def rel_frob(a, b):
    nb = np.linalg.norm(b)
    diff = np.linalg.norm(np.asarray(a) - np.asarray(b))
    return diff / nb if nb > 0 else diff


def plane_points(rng, n, center, normal, extent, noise=0.0):
    normal = np.asarray(normal, float) / np.linalg.norm(normal)
    helper = np.array([1.0, 0, 0]) if abs(normal[0]) < 0.9 else np.array([0, 1.0, 0])
    u = np.cross(normal, helper)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    a = rng.uniform(-extent / 2, extent / 2, size=(n, 2))
    pts = np.asarray(center, float) + a[:, :1] * u + a[:, 1:] * v
    if noise:
        pts = pts + rng.normal(0, noise, size=(n, 1)) * normal
    return pts


def central_diff_jacobian(fun, x0, retract, dim, h=1e-6):
    """Columns d fun(retract(x0, h e_i)) / dh by central differences."""
    cols = []
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = h
        cols.append((fun(retract(x0, e)) - fun(retract(x0, -e))) / (2 * h))
    return np.stack(cols, axis=-1)


def jac_rel_err(analytic, numeric):
    scale = max(np.linalg.norm(numeric), 1e-8)
    return np.linalg.norm(analytic - numeric) / scale


def random_rotation_matrix(rng, max_angle=np.pi - 1e-3):
    from scipy.spatial.transform import Rotation as SciRot
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return SciRot.from_rotvec(axis * rng.uniform(0, max_angle)).as_matrix()


def smooth_imu_signal(rng, t, gyro_amp=1.0, acc_amp=2.0):
    """Low-frequency random sinusoids for gyro and accel channels."""
    t = np.asarray(t, float)
    freq = rng.uniform(0.2, 2.0, size=(2, 3))
    phase = rng.uniform(0, 2 * np.pi, size=(2, 3))
    bias = rng.normal(size=(2, 3))
    gyro = gyro_amp * (0.3 * bias[0] + np.sin(2 * np.pi * freq[0] * t[:, None] + phase[0]))
    acc = acc_amp * (bias[1] + np.sin(2 * np.pi * freq[1] * t[:, None] + phase[1])) + [0, 0, 9.81]
    return gyro, acc


def fine_step_preintegration(t, gyro, acc, bg, ba, factor=10):
    """Integrate body-frame increments on a grid ``factor`` times finer.

    Measurements are linearly interpolated between samples; rotation uses
    scipy's rotation-vector exponential and every substep uses the
    trapezoid of the two endpoint accelerations.
    """
    from scipy.spatial.transform import Rotation as SciRot
    t = np.asarray(t, float)
    tf = np.concatenate([np.linspace(t[k], t[k + 1], factor, endpoint=False) for k in range(len(t) - 1)]
                        + [t[-1:]])
    w = np.stack([np.interp(tf, t, gyro[:, i]) for i in range(3)], axis=1) - bg
    a = np.stack([np.interp(tf, t, acc[:, i]) for i in range(3)], axis=1) - ba
    R = np.eye(3)
    v = np.zeros(3)
    p = np.zeros(3)
    for k in range(len(tf) - 1):
        h = tf[k + 1] - tf[k]
        R1 = R @ SciRot.from_rotvec(0.5 * (w[k] + w[k + 1]) * h).as_matrix()
        ab = 0.5 * (R @ a[k] + R1 @ a[k + 1])
        p = p + v * h + 0.5 * ab * h * h
        v = v + ab * h
        R = R1
    return R, v, p


def brute_force_query(m: SurfelMap, f, depths=None):
    """Exhaustive scan of every node with the stage-one predicates."""
    cfg = m.config
    depths = range(1, cfg.max_depth + 1) if depths is None else depths
    hits = set()
    for d in depths:
        for key in m.keys(d):
            s = m.stats(key)
            if s.N < cfg.min_points:
                continue
            lam = np.linalg.eigvalsh(s.C / (s.N - 1))
            if lam.sum() < 1e-12 or lam[1] - lam[0] <= 1e-12:
                continue
            rho = 2 * (lam[1] - lam[0]) / lam.sum()
            if not rho > cfg.min_planarity:
                continue
            lo, hi = m.node_bounds(key)
            gap = np.maximum(np.maximum(lo - f, 0), f - hi)
            if gap @ gap <= cfg.search_radius ** 2:
                hits.add(key)
    return hits


def pts_oracle(coeff, Rm, pm, Rm1, pm1, sigma):
    """Point-to-surfel residual through scipy's slerp and a plain lerp."""
    from scipy.spatial.transform import Rotation as SciRot, Slerp
    rot = Slerp([0.0, 1.0], SciRot.from_matrix(np.stack([Rm, Rm1])))([coeff.s]).as_matrix()[0]
    p = (1 - coeff.s) * pm + coeff.s * pm1
    return coeff.n @ (rot @ coeff.f + p - coeff.mu) / sigma


def relative_pose_oracle(edge, Ti, Tj):
    """Error pose (measured^-1 * Ti^-1 * Tj) as 4x4 matrices."""
    from surfel_lio.geometry import so3_log
    M = np.eye(4)
    M[:3, :3], M[:3, 3] = edge.R, edge.p
    E = np.linalg.inv(M) @ np.linalg.inv(Ti.matrix()) @ Tj.matrix()
    return np.concatenate([so3_log(E[:3, :3]), E[:3, 3]])
