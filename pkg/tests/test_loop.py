import numpy as np
import pytest

from surfel_lio.geometry import Pose, rot_z, so3_exp, so3_log
from surfel_lio.loop import (
    ODOM_COV, Keyframe, LoopConfig, PoseGraph, RelativePosePrior, build_pose_graph, detect_loop,
    icp_point_to_plane, pose_graph_residual, rebuild_map, verify_loop,
)
from surfel_lio.surfel_map import SurfelMap

from helpers import (
    central_diff_jacobian, jac_rel_err, plane_points, random_rotation_matrix, relative_pose_oracle,
)


def random_pose(rng, angle=np.pi - 1e-3, scale=3.0):
    return Pose.from_rt(random_rotation_matrix(rng, angle), rng.normal(size=3) * scale)


def test_pose_graph_jacobians_match_finite_differences():
    rng = np.random.default_rng(21)
    worst = 0.0
    for _ in range(100):
        Ti, Tj = random_pose(rng), random_pose(rng)
        A = rng.normal(size=(6, 6))
        cov = A @ A.T + 0.1 * np.eye(6)
        e = RelativePosePrior(0, 1, random_rotation_matrix(rng, 2.5), rng.normal(size=3), cov)
        r, Ji, Jj = pose_graph_residual(e, Ti.R, Ti.p, Tj.R, Tj.p, whiten=False)
        np.testing.assert_allclose(r, relative_pose_oracle(e, Ti, Tj), atol=1e-9)

        def ret(x, d):
            return (Pose.from_rt(x[0].R @ so3_exp(d[:3]), x[0].p + d[3:6]),
                    Pose.from_rt(x[1].R @ so3_exp(d[6:9]), x[1].p + d[9:]))

        num = central_diff_jacobian(lambda x: relative_pose_oracle(e, *x), (Ti, Tj), ret, 12)
        worst = max(worst, jac_rel_err(np.concatenate([Ji, Jj], axis=1), num))
    assert worst <= 1e-5


def test_residual_zero_at_measurement():
    rng = np.random.default_rng(1)
    Ti, Tj = random_pose(rng), random_pose(rng)
    e = RelativePosePrior.between(0, 1, Ti, Tj, np.eye(6))
    r, _, _ = pose_graph_residual(e, Ti.R, Ti.p, Tj.R, Tj.p)
    assert np.abs(r).max() < 1e-12


def circle_poses(n, radius=5.0):
    out = []
    for k in range(n):
        a = 2 * np.pi * k / n
        out.append(Pose.from_rt(rot_z(a + np.pi / 2), [radius * np.cos(a), radius * np.sin(a), 0.0]))
    return out


def drifted(poses, yaw_rate, trans_rate):
    out = [poses[0]]
    for k in range(1, len(poses)):
        rel = poses[k - 1].inverse() @ poses[k]
        bias = Pose.from_rt(rot_z(yaw_rate), [trans_rate, 0, 0])
        out.append(out[-1] @ bias @ rel)
    return out


def ate(a, b):
    return np.sqrt(np.mean([np.sum((x.p - y.p) ** 2) for x, y in zip(a, b)]))


def test_loop_edge_removes_drift():
    truth = circle_poses(40)
    est = drifted(truth, 0.01, 0.02)
    g = PoseGraph()
    for P in est:
        g.add_node(P)
    for k in range(1, len(est)):
        g.add_edge(RelativePosePrior.between(k - 1, k, est[k - 1], est[k], ODOM_COV))
    before = np.linalg.norm(est[-1].p - truth[-1].p)
    g.add_edge(RelativePosePrior.between(0, len(est) - 1, truth[0], truth[-1], np.eye(6) * 1e-6, "loop"))
    out, rep = g.optimize()
    after = np.linalg.norm(out[-1].p - truth[-1].p)
    assert after <= 0.1 * before
    assert ate(out, truth) < ate(est, truth)
    np.testing.assert_allclose(out[0].p, est[0].p, atol=0)   # gauge held


def test_duplicate_edge_equals_halved_covariance():
    truth = circle_poses(12)
    est = drifted(truth, 0.02, 0.05)

    def solve(loop_edges):
        g = PoseGraph()
        for P in est:
            g.add_node(P)
        for k in range(1, len(est)):
            g.add_edge(RelativePosePrior.between(k - 1, k, est[k - 1], est[k], ODOM_COV))
        for e in loop_edges:
            g.add_edge(e)
        return g.optimize(max_iter=50)[0]

    cov = np.eye(6) * 1e-3
    e = RelativePosePrior.between(0, 11, truth[0], truth[11], cov, "loop")
    e_half = RelativePosePrior.between(0, 11, truth[0], truth[11], cov / 2, "loop")
    a, b = solve([e, e]), solve([e_half])
    for x, y in zip(a, b):
        np.testing.assert_allclose(x.p, y.p, atol=1e-7)
        np.testing.assert_allclose(x.R, y.R, atol=1e-7)


def box_cloud(rng, n=600):
    faces = [((0, 0, 0), (0, 0, 1)), ((4, 0, 1), (-1, 0, 0)), ((0, 3, 1), (0, -1, 0)), ((-4, 0, 1), (1, 0, 0)),
             ((0, -3, 1), (0, 1, 0)), ((1, 1, 0.5), (1, 1, 0))]
    return np.concatenate([plane_points(rng, n, c, nn, 4.0) for c, nn in faces])


def test_icp_recovers_small_transform():
    rng = np.random.default_rng(3)
    target = box_cloud(rng)
    T = Pose.from_rt(rot_z(0.08) @ so3_exp([0.01, -0.02, 0]), [0.2, -0.15, 0.05])
    source = T.inverse().transform(target[rng.permutation(len(target))[:1500]])
    res = icp_point_to_plane(source, target, Pose.identity())
    assert res.fitness < 0.01
    assert np.linalg.norm(res.T.p - T.p) < 0.01
    assert np.linalg.norm(so3_log(res.T.R.T @ T.R)) < 2e-3


def test_detect_loop_matches_brute_force():
    rng = np.random.default_rng(4)
    cfg = LoopConfig()
    for trial in range(20):
        kfs = [Keyframe(i, Pose.from_rt(np.eye(3), rng.uniform(-6, 6, 3)), np.zeros((0, 3)), float(i))
               for i in range(80)]
        q = Keyframe(80, Pose.from_rt(np.eye(3), rng.uniform(-6, 6, 3)), np.zeros((0, 3)), 80.0)
        got = detect_loop(kfs, q, cfg)
        d = [np.linalg.norm(k.pose.p - q.pose.p) for k in kfs]
        nearest = sorted(range(80), key=lambda i: (d[i], i))[:cfg.num_candidates]
        ok = [i for i in nearest if d[i] <= cfg.max_distance and q.t - kfs[i].t >= cfg.min_time_gap]
        expect = min(ok, key=lambda i: (d[i], i)) if ok else None
        assert (got.id if got else None) == expect


def test_verify_loop_returns_consistent_edge():
    rng = np.random.default_rng(5)
    world = box_cloud(rng)
    Pa = Pose.from_rt(rot_z(0.1), [0.5, 0.2, 1.0])
    Pb_true = Pose.from_rt(rot_z(0.3), [0.8, -0.1, 1.0])
    a = Keyframe(0, Pa, Pa.inverse().transform(world), 0.0)
    b_cloud = Pb_true.inverse().transform(world[rng.permutation(len(world))[:1500]])
    drift = Pose.from_rt(rot_z(0.03), [0.1, 0.05, 0.0])
    b = Keyframe(1, Pb_true @ drift, b_cloud, 40.0)
    e = verify_loop([a, b], a, b)
    assert e is not None and e.kind == "loop"
    rel = Pa.inverse() @ Pb_true
    np.testing.assert_allclose(e.p, rel.p, atol=0.01)
    # a far-off guess is rejected
    wrong = Keyframe(1, Pose.from_rt(np.eye(3), [30.0, 0, 0]), b_cloud[:50] * 0 + 100, 40.0)
    assert verify_loop([a, wrong], a, wrong) is None


def test_rebuild_map_matches_incremental():
    rng = np.random.default_rng(6)
    kfs = [Keyframe(i, random_pose(rng, 0.5, 1.0), rng.normal(size=(300, 3)), float(i)) for i in range(5)]
    inc = SurfelMap()
    for kf in kfs:
        inc.insert_cloud(kf.world_cloud())
    reb = rebuild_map(kfs)
    assert set(inc.keys()) == set(reb.keys())
    for k in inc.keys():
        a, b = inc.stats(k), reb.stats(k)
        assert a.N == b.N
        np.testing.assert_allclose(a.S, b.S, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(a.C, b.C, rtol=1e-9, atol=1e-9)


def test_g2o_export(tmp_path):
    poses = circle_poses(5)
    kfs = [Keyframe(i, P, np.zeros((0, 3)), float(i)) for i, P in enumerate(poses)]
    g = build_pose_graph(kfs)
    g.export_g2o(tmp_path / "g.g2o")
    lines = (tmp_path / "g.g2o").read_text().splitlines()
    assert sum(l.startswith("VERTEX_SE3:QUAT") for l in lines) == 5
    edges = [l.split() for l in lines if l.startswith("EDGE_SE3:QUAT")]
    assert len(edges) == 4 and all(len(e) == 3 + 7 + 21 for e in edges)
    assert float(edges[0][10]) == pytest.approx(1e3)   # translation information comes first


def test_edge_validation():
    with pytest.raises(ValueError):
        RelativePosePrior(1, 1, np.eye(3), np.zeros(3), np.eye(6))
    g = PoseGraph()
    g.add_node(Pose.identity())
    with pytest.raises(IndexError):
        g.add_edge(RelativePosePrior(0, 3, np.eye(3), np.zeros(3), np.eye(6)))
