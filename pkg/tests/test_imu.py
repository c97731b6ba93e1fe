import numpy as np
import pytest

from helpers import (
    central_diff_jacobian, fine_step_preintegration, jac_rel_err, random_rotation_matrix,
    smooth_imu_signal,
)
from surfel_lio.geometry import so3_exp, so3_log
from surfel_lio.imu import (
    GRAVITY, ImuCoverageError, ImuNoise, ImuOrderError, ImuSample, ImuSeries, StateEstimate,
    preint_residual, preintegrate, propagate, propagate_backward, static_initialization,
)

NOISE = ImuNoise()


def series_over(rng, t0=0.0, duration=0.1, rate=400.0, **kw):
    t = t0 + np.arange(int(round(duration * rate)) + 1) / rate
    gyro, acc = smooth_imu_signal(rng, t, **kw)
    return ImuSeries(t, gyro, acc)


def random_state(rng):
    return StateEstimate(random_rotation_matrix(rng), rng.normal(size=3), rng.normal(size=3),
                         rng.normal(size=3) * 0.02, rng.normal(size=3) * 0.1)


def test_rest_keeps_position_and_velocity():
    t = np.arange(801) / 400.0
    R0 = so3_exp([0.1, -0.2, 0.3])
    acc = np.tile(-R0.T @ GRAVITY, (len(t), 1))
    x0 = StateEstimate(R0, [1, 2, 3], [0, 0, 0])
    seq, x1 = propagate(x0, ImuSeries(t, np.zeros((len(t), 3)), acc), NOISE)
    np.testing.assert_allclose(x1.p, [1, 2, 3], atol=1e-9)
    np.testing.assert_allclose(x1.v, 0, atol=1e-9)
    assert len(seq) == len(t)


def test_constant_net_acceleration_closed_form():
    t = np.arange(41) / 400.0
    a_w = np.array([0.5, -1.0, 2.0])
    acc = np.tile(a_w - GRAVITY, (len(t), 1))
    _, x1 = propagate(StateEstimate(), ImuSeries(t, np.zeros((len(t), 3)), acc), NOISE)
    np.testing.assert_allclose(x1.p, 0.5 * a_w * 0.1 ** 2, atol=1e-12)
    np.testing.assert_allclose(x1.v, a_w * 0.1, atol=1e-12)


def test_unordered_samples_rejected():
    samples = [ImuSample(0.0, np.zeros(3), np.zeros(3)), ImuSample(0.0, np.zeros(3), np.zeros(3))]
    with pytest.raises(ImuOrderError):
        propagate(StateEstimate(), samples, NOISE)


def test_backward_cases(rng):
    t = np.arange(41) / 400.0
    w = np.array([0.2, -0.1, 0.5])
    series = ImuSeries(t, np.tile(w, (len(t), 1)), np.tile(-GRAVITY, (len(t), 1)))
    x1 = StateEstimate()
    _, x0 = propagate_backward(x1, series, NOISE)
    np.testing.assert_allclose(x0.R, so3_exp(-w * 0.1), atol=1e-12)

    still = ImuSeries(t, np.zeros((len(t), 3)), np.tile(-GRAVITY, (len(t), 1)))
    _, x0 = propagate_backward(x1, still, NOISE)
    np.testing.assert_allclose(x0.p, 0, atol=1e-12)
    np.testing.assert_allclose(x0.R, np.eye(3), atol=1e-15)


def test_forward_backward_round_trip(rng):
    for _ in range(20):
        series = series_over(rng, duration=0.5)
        x = random_state(rng)
        _, x0 = propagate_backward(x, series, NOISE)
        _, back = propagate(x0, series, NOISE)
        np.testing.assert_allclose(back.R, x.R, atol=1e-9)
        np.testing.assert_allclose(back.p, x.p, atol=1e-9)
        np.testing.assert_allclose(back.v, x.v, atol=1e-9)


def test_preintegration_trivial_cases():
    t = np.arange(41) / 400.0
    z = np.zeros((len(t), 3))
    pre = preintegrate(ImuSeries(t, z, z), np.zeros(3), np.zeros(3), NOISE)
    np.testing.assert_array_equal(pre.dR, np.eye(3))
    np.testing.assert_array_equal(pre.dv, 0)
    np.testing.assert_array_equal(pre.dp, 0)
    a = np.array([1.0, -2.0, 3.0])
    pre = preintegrate(ImuSeries(t, z, np.tile(a, (len(t), 1))), np.zeros(3), np.zeros(3), NOISE)
    np.testing.assert_allclose(pre.dv, a * 0.1, atol=1e-13)
    np.testing.assert_allclose(pre.dp, 0.5 * a * 0.01, atol=1e-13)
    assert pre.dt == pytest.approx(0.1)
    with pytest.raises(ValueError):
        preintegrate(ImuSeries(t[:1], z[:1], z[:1]), np.zeros(3), np.zeros(3), NOISE)


def test_preintegration_matches_fine_step_integrator(rng):
    worst = 0.0
    for _ in range(20):
        s = series_over(rng)
        bg, ba = rng.normal(size=3) * 0.01, rng.normal(size=3) * 0.05
        pre = preintegrate(s, bg, ba, NOISE)
        R, v, p = fine_step_preintegration(s.t, s.gyro, s.acc, bg, ba)
        worst = max(worst, np.linalg.norm(so3_log(pre.dR.T @ R)),
                    np.abs(pre.dv - v).max(), np.abs(pre.dp - p).max())
    assert worst <= 1e-6


def test_preintegration_ignores_gravity(rng):
    s = series_over(rng)
    other = ImuNoise(gravity=(0.3, -0.2, -9.8))
    a = preintegrate(s, np.zeros(3), np.zeros(3), NOISE)
    b = preintegrate(s, np.zeros(3), np.zeros(3), other)
    assert np.array_equal(a.dR, b.dR) and np.array_equal(a.dv, b.dv) and np.array_equal(a.dp, b.dp)


def test_covariance_is_symmetric_psd(rng):
    for _ in range(10):
        pre = preintegrate(series_over(rng), rng.normal(size=3) * 0.01, np.zeros(3), NOISE)
        assert np.array_equal(pre.cov, pre.cov.T)
        lam = np.linalg.eigvalsh(pre.cov)
        assert lam.min() >= -1e-12 * np.trace(pre.cov)


def test_bias_jacobians_first_order(rng):
    s = series_over(rng)
    bg, ba = rng.normal(size=3) * 0.01, rng.normal(size=3) * 0.05
    pre = preintegrate(s, bg, ba, NOISE)
    for k in range(3):
        for which in ("g", "a"):
            d = np.zeros(3)
            d[k] = 1e-6
            if which == "g":
                plus, minus = (preintegrate(s, bg + d, ba, NOISE), preintegrate(s, bg - d, ba, NOISE))
                J = pre.J_bg
            else:
                plus, minus = (preintegrate(s, bg, ba + d, NOISE), preintegrate(s, bg, ba - d, NOISE))
                J = pre.J_ba
            dth = (so3_log(pre.dR.T @ plus.dR) - so3_log(pre.dR.T @ minus.dR)) / 2e-6
            num = np.concatenate([dth, (plus.dv - minus.dv) / 2e-6, (plus.dp - minus.dp) / 2e-6])
            assert jac_rel_err(J[:, k], num) < 1e-5 or np.linalg.norm(J[:, k] - num) < 1e-9


def test_residual_zero_on_propagated_states(rng):
    for _ in range(10):
        s = series_over(rng)
        x0 = random_state(rng)
        _, x1 = propagate(x0, s, NOISE)
        pre = preintegrate(s, x0.bg, x0.ba, NOISE)
        r, _, _ = preint_residual(pre, x0, x1, NOISE, whiten=False, jacobians=False)
        assert np.abs(r).max() <= 1e-8


def test_position_perturbation_only_moves_position_block(rng):
    s = series_over(rng)
    x0 = random_state(rng)
    _, x1 = propagate(x0, s, NOISE)
    pre = preintegrate(s, x0.bg, x0.ba, NOISE)
    moved = x1.copy()
    moved.p = moved.p + [1e-3, 0, 0]
    r, _, _ = preint_residual(pre, x0, moved, NOISE, whiten=False, jacobians=False)
    np.testing.assert_allclose(r[6:9], x0.R.T @ [1e-3, 0, 0], atol=1e-12)
    np.testing.assert_allclose(np.delete(r, [6, 7, 8]), 0, atol=1e-10)


def test_residual_jacobians_match_finite_differences(rng):
    worst = 0.0
    for _ in range(100):
        s = series_over(rng)
        x0 = random_state(rng)
        pre = preintegrate(s, x0.bg + rng.normal(size=3) * 1e-3, x0.ba + rng.normal(size=3) * 1e-2, NOISE)
        x1 = random_state(rng)
        _, Jm, Jm1 = preint_residual(pre, x0, x1, NOISE)

        def f0(x):
            return preint_residual(pre, x, x1, NOISE, jacobians=False)[0]

        def f1(x):
            return preint_residual(pre, x0, x, NOISE, jacobians=False)[0]

        retract = lambda x, d: x.retract(d)  # noqa: E731
        worst = max(worst, jac_rel_err(Jm, central_diff_jacobian(f0, x0, retract, 15)),
                    jac_rel_err(Jm1, central_diff_jacobian(f1, x1, retract, 15)))
    assert worst <= 1e-5


def test_segment_interpolates_bounds():
    t = np.arange(11) / 100.0
    g = np.c_[t, 2 * t, 3 * t]
    series = ImuSeries(t, g, g)
    seg = series.segment(0.015, 0.05)
    assert seg.t[0] == 0.015 and seg.t[-1] == 0.05
    np.testing.assert_allclose(seg.gyro[0], [0.015, 0.03, 0.045])
    assert len(seg) == 5
    with pytest.raises(ImuCoverageError):
        series.segment(0.05, 0.2)


def test_static_initialization_recovers_tilt_and_gyro_bias(rng):
    from surfel_lio.geometry import rot_x, rot_y, rot_z
    R = rot_z(0.7) @ rot_y(0.1) @ rot_x(-0.05)
    t = np.arange(400) / 400.0
    acc = np.tile(-R.T @ GRAVITY, (len(t), 1))
    gyro = np.tile([0.01, -0.02, 0.005], (len(t), 1))
    x = static_initialization(ImuSeries(t, gyro, acc), 1.0, NOISE)
    np.testing.assert_allclose(x.R @ acc[0], -GRAVITY, atol=1e-12)
    np.testing.assert_allclose(x.bg, [0.01, -0.02, 0.005])
    # heading set to zero
    assert abs(np.arctan2(x.R[1, 0], x.R[0, 0])) < 1e-12


def test_batch_residuals_match_single_factor():
    from surfel_lio.imu import preint_residuals_batch
    rng = np.random.default_rng(17)
    noise = ImuNoise()
    t = np.arange(0, 41) / 400.0
    gyro, acc = smooth_imu_signal(rng, t)
    series = ImuSeries(t, gyro, acc)
    pres, xs = [], [StateEstimate(random_rotation_matrix(rng), rng.normal(size=3), rng.normal(size=3),
                                  rng.normal(size=3) * 0.01, rng.normal(size=3) * 0.1)]
    for k in range(4):
        seg = series.segment(k * 0.025, (k + 1) * 0.025)
        pres.append(preintegrate(seg, rng.normal(size=3) * 0.01, rng.normal(size=3) * 0.1, noise))
        xs.append(StateEstimate(random_rotation_matrix(rng), rng.normal(size=3), rng.normal(size=3),
                                rng.normal(size=3) * 0.01, rng.normal(size=3) * 0.1))
    batch = preint_residuals_batch(pres, xs, noise)
    for m in range(4):
        r, _, _ = preint_residual(pres[m], xs[m], xs[m + 1], noise, jacobians=False)
        np.testing.assert_allclose(batch[m], r, rtol=1e-10, atol=1e-10)
