"""IMU state propagation and preintegration factors.

Propagation and preintegration share one fourth-order sample integrator
(see :class:`_Steps`). Because the schemes are identical, a preintegration
residual evaluated on states produced by :func:`propagate` is zero up to
rounding.

Tangent ordering of a state is (phi, p, v, bg, ba); residual ordering of a
preintegration factor is (dtheta, dv, dp, dbg, dba).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Pose, Rotation, right_jacobian, right_jacobian_inv, skew, so3_exp, so3_log

GRAVITY = np.array([0.0, 0.0, -9.81])

# state tangent slices
PHI, POS, VEL, BG, BA = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15)

_SNAP = 1e-9


class ImuOrderError(ValueError):
    pass


class ImuCoverageError(ValueError):
    pass


class SingularCovariance(ValueError):
    pass


@dataclass(frozen=True)
class ImuSample:
    t: float
    omega: np.ndarray
    accel: np.ndarray


@dataclass
class ImuSeries:
    """Struct-of-arrays IMU buffer: ``t (n,)``, ``gyro (n, 3)``, ``acc (n, 3)``."""

    t: np.ndarray
    gyro: np.ndarray
    acc: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        self.acc = np.asarray(self.acc, dtype=float).reshape(-1, 3)
        if not (len(self.t) == len(self.gyro) == len(self.acc)):
            raise ValueError("IMU arrays differ in length")
        if not (np.all(np.isfinite(self.gyro)) and np.all(np.isfinite(self.acc))
                and np.all(np.isfinite(self.t))):
            raise ValueError("non-finite IMU sample")

    @classmethod
    def from_samples(cls, samples: Sequence[ImuSample]) -> "ImuSeries":
        if isinstance(samples, ImuSeries):
            return samples
        return cls([s.t for s in samples], [s.omega for s in samples], [s.accel for s in samples])

    def __len__(self) -> int:
        return len(self.t)

    def check_order(self):
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise ImuOrderError("IMU timestamps are not strictly increasing")

    def samples(self) -> list[ImuSample]:
        return [ImuSample(float(t), w.copy(), a.copy()) for t, w, a in zip(self.t, self.gyro, self.acc)]

    def segment(self, t0: float, t1: float) -> "ImuSeries":
        """Samples spanning exactly ``[t0, t1]``.

        End samples are linearly interpolated when a bound falls between two
        measurements; bounds within 1 ns of a sample snap to it.
        """
        if t1 <= t0:
            raise ValueError("empty IMU interval")
        t = self.t
        if len(t) < 2 or t0 < t[0] - _SNAP or t1 > t[-1] + _SNAP:
            raise ImuCoverageError(f"IMU does not cover [{t0:.6f}, {t1:.6f}]")
        i0 = int(np.searchsorted(t, t0 - _SNAP))
        i1 = int(np.searchsorted(t, t1 + _SNAP, side="right"))
        ts, gs, as_ = list(t[i0:i1]), list(self.gyro[i0:i1]), list(self.acc[i0:i1])
        if not ts or abs(ts[0] - t0) > _SNAP:
            w, a = self._interp(t0)
            ts.insert(0, t0)
            gs.insert(0, w)
            as_.insert(0, a)
        else:
            ts[0] = t0
        if abs(ts[-1] - t1) > _SNAP:
            w, a = self._interp(t1)
            ts.append(t1)
            gs.append(w)
            as_.append(a)
        else:
            ts[-1] = t1
        return ImuSeries(np.array(ts), np.array(gs), np.array(as_))

    def _interp(self, tq: float):
        t = self.t
        j = int(np.clip(np.searchsorted(t, tq), 1, len(t) - 1))
        s = (tq - t[j - 1]) / (t[j] - t[j - 1])
        return ((1 - s) * self.gyro[j - 1] + s * self.gyro[j],
                (1 - s) * self.acc[j - 1] + s * self.acc[j])


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time noise densities and the world gravity vector."""

    gyro_noise: float = 1.7e-4      # rad/s/sqrt(Hz)
    accel_noise: float = 2.0e-3     # m/s^2/sqrt(Hz)
    gyro_walk: float = 1.9e-5       # rad/s^2/sqrt(Hz)
    accel_walk: float = 3.0e-3      # m/s^3/sqrt(Hz)
    gravity: tuple = (0.0, 0.0, -9.81)
    gravity_tolerance: float = 0.5

    def __post_init__(self):
        for name in ("gyro_noise", "accel_noise", "gyro_walk", "accel_walk"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        g = np.asarray(self.gravity, dtype=float)
        if g.shape != (3,) or abs(np.linalg.norm(g) - 9.81) > self.gravity_tolerance:
            raise ValueError(f"gravity {self.gravity} is not a 9.81 m/s^2 vector")

    @property
    def g(self) -> np.ndarray:
        return np.asarray(self.gravity, dtype=float)


@dataclass
class StateEstimate:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = self.R
        if isinstance(R, Rotation):
            R = R.matrix
        self.R = np.array(R, dtype=float).reshape(3, 3)
        self.p = np.array(self.p, dtype=float).reshape(3)
        self.v = np.array(self.v, dtype=float).reshape(3)
        self.bg = np.array(self.bg, dtype=float).reshape(3)
        self.ba = np.array(self.ba, dtype=float).reshape(3)

    @property
    def rotation(self) -> Rotation:
        return Rotation.from_matrix(self.R)

    @property
    def pose(self) -> Pose:
        return Pose.from_rt(self.R, self.p)

    def copy(self) -> "StateEstimate":
        return StateEstimate(self.R.copy(), self.p.copy(), self.v.copy(), self.bg.copy(), self.ba.copy())

    def retract(self, dx) -> "StateEstimate":
        dx = np.asarray(dx, dtype=float)
        return StateEstimate(self.R @ so3_exp(dx[PHI]), self.p + dx[POS], self.v + dx[VEL],
                             self.bg + dx[BG], self.ba + dx[BA])

    def clamp_biases(self, gyro_cap: float = 0.5, accel_cap: float = 2.0) -> "StateEstimate":
        out = self.copy()
        out.bg = np.clip(out.bg, -gyro_cap, gyro_cap)
        out.ba = np.clip(out.ba, -accel_cap, accel_cap)
        return out


@dataclass
class PropagatedPoseSeq:
    """Dense poses at IMU sample times over one knot interval."""

    t: np.ndarray
    R: np.ndarray
    p: np.ndarray
    v: np.ndarray | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("pose timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.t)

    def pose(self, i: int) -> Pose:
        return Pose.from_rt(self.R[i], self.p[i])

    @staticmethod
    def concatenate(seqs: Sequence["PropagatedPoseSeq"]) -> "PropagatedPoseSeq":
        """Join consecutive sequences.

        Where one sequence ends at the time the next begins, the later
        sequence's sample wins.
        """
        seqs = [s for s in seqs if len(s)]
        ts, Rs, ps = [], [], []
        for i, s in enumerate(seqs):
            keep = np.ones(len(s), bool)
            if i + 1 < len(seqs):
                keep = s.t < seqs[i + 1].t[0] - _SNAP
            ts.append(s.t[keep])
            Rs.append(s.R[keep])
            ps.append(s.p[keep])
        return PropagatedPoseSeq(np.concatenate(ts), np.concatenate(Rs), np.concatenate(ps))


class _Steps:
    """Per-step quantities of the fourth-order sample integrator.

    Measurements are treated as linear between samples. The rotation
    increment is a two-term Magnus expansion, exact to fifth order for a
    linear rate, and the specific force is integrated with Simpson's rule
    using the orientation at the step midpoint.
    """

    def __init__(self, series: ImuSeries, bg, ba):
        t = series.t
        self.h = np.diff(t)
        h = self.h[:, None]
        w0 = series.gyro[:-1] - bg
        w1 = series.gyro[1:] - bg
        wm = 0.5 * (w0 + w1)
        om = h * wm + (h * h / 12.0) * np.cross(w0, w1)
        om_half = 0.5 * h * 0.5 * (w0 + wm) + (h * h / 48.0) * np.cross(w0, wm)
        self.omega = om
        self.omega_half = om_half
        self.E = so3_exp(om)
        self.E_half = so3_exp(om_half)
        acc = series.acc - ba
        self.a0 = acc[:-1]
        self.a1 = acc[1:]
        self.am = 0.5 * (self.a0 + self.a1)
        self._w0, self._w1, self._wm = w0, w1, wm

    def __len__(self) -> int:
        return len(self.h)

    def bias_jacobians(self):
        """d(omega)/d(bg) and d(omega_half)/d(bg) per step."""
        h = self.h[:, None, None]
        eye = np.eye(3)
        B = -h * eye + (h * h / 12.0) * skew(self._w1 - self._w0)
        Bh = -0.5 * h * eye + (h * h / 48.0) * skew(self._wm - self._w0)
        return B, Bh

    def forces(self, R, k):
        """Rotated specific forces at start, middle and end of step ``k``."""
        Rm = R @ self.E_half[k]
        R1 = R @ self.E[k]
        return R @ self.a0[k], Rm @ self.am[k], R1 @ self.a1[k], Rm, R1


def propagate(x0: StateEstimate, samples, noise: ImuNoise | None = None):
    """Forward-integrate ``x0`` through ``samples``.

    Returns the pose sequence at every sample time (the first entry is ``x0``)
    and the state at the last sample.
    """
    series = ImuSeries.from_samples(samples)
    if len(series) == 0:
        raise ValueError("no IMU samples")
    series.check_order()
    g = GRAVITY if noise is None else noise.g
    st = _Steps(series, x0.bg, x0.ba)
    n = len(series)
    Rs = np.empty((n, 3, 3))
    ps = np.empty((n, 3))
    vs = np.empty((n, 3))
    R, p, v = x0.R.copy(), x0.p.copy(), x0.v.copy()
    Rs[0], ps[0], vs[0] = R, p, v
    for k in range(n - 1):
        h = st.h[k]
        f0, fm, f1, _, R1 = st.forces(R, k)
        p = p + v * h + (h * h / 6.0) * (f0 + 2.0 * fm) + 0.5 * g * h * h
        v = v + (h / 6.0) * (f0 + 4.0 * fm + f1) + g * h
        R = R1
        Rs[k + 1], ps[k + 1], vs[k + 1] = R, p, v
    x1 = StateEstimate(R, p, v, x0.bg.copy(), x0.ba.copy())
    return PropagatedPoseSeq(series.t.copy(), Rs, ps, vs), x1


def propagate_backward(x1: StateEstimate, samples, noise: ImuNoise | None = None):
    """Integrate from the state at the last sample back to the first.

    Each step exactly inverts the forward step, so ``propagate`` applied to
    the result recovers ``x1`` up to rounding. Returns the pose sequence
    (increasing time) and the state at the first sample.
    """
    series = ImuSeries.from_samples(samples)
    if len(series) == 0:
        raise ValueError("no IMU samples")
    series.check_order()
    g = GRAVITY if noise is None else noise.g
    st = _Steps(series, x1.bg, x1.ba)
    n = len(series)
    Rs = np.empty((n, 3, 3))
    ps = np.empty((n, 3))
    vs = np.empty((n, 3))
    R, p, v = x1.R.copy(), x1.p.copy(), x1.v.copy()
    Rs[-1], ps[-1], vs[-1] = R, p, v
    for k in range(n - 2, -1, -1):
        h = st.h[k]
        R0 = R @ st.E[k].T
        f0, fm, f1, _, _ = st.forces(R0, k)
        v = v - (h / 6.0) * (f0 + 4.0 * fm + f1) - g * h
        p = p - v * h - (h * h / 6.0) * (f0 + 2.0 * fm) - 0.5 * g * h * h
        R = R0
        Rs[k], ps[k], vs[k] = R, p, v
    x0 = StateEstimate(R, p, v, x1.bg.copy(), x1.ba.copy())
    return PropagatedPoseSeq(series.t.copy(), Rs, ps, vs), x0


@dataclass(frozen=True, eq=False)
class Preintegration:
    dR: np.ndarray
    dv: np.ndarray
    dp: np.ndarray
    dt: float
    cov: np.ndarray
    J_bg: np.ndarray   # 9x3, rows (theta, v, p)
    J_ba: np.ndarray
    bg_lin: np.ndarray
    ba_lin: np.ndarray
    series: ImuSeries
    noise: ImuNoise

    @property
    def rotation(self) -> Rotation:
        return Rotation.from_matrix(self.dR)

    def sqrt_info(self) -> np.ndarray:
        """Whitening matrix W with W^T W = cov^-1."""
        cached = self.__dict__.get("_sqrt_info")
        if cached is not None:
            return cached
        try:
            L = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as exc:
            raise SingularCovariance("preintegration covariance is not positive definite") from exc
        W = np.linalg.solve(L, np.eye(15))
        object.__setattr__(self, "_sqrt_info", W)
        return W

    def corrected(self, bg, ba):
        """First-order bias-corrected (dR, dv, dp)."""
        dbg = np.asarray(bg, dtype=float) - self.bg_lin
        dba = np.asarray(ba, dtype=float) - self.ba_lin
        dR = self.dR @ so3_exp(self.J_bg[0:3] @ dbg)
        dv = self.dv + self.J_bg[3:6] @ dbg + self.J_ba[3:6] @ dba
        dp = self.dp + self.J_bg[6:9] @ dbg + self.J_ba[6:9] @ dba
        return dR, dv, dp

    def needs_relinearization(self, bg, ba, threshold: float = 1e-2) -> bool:
        dev = max(np.abs(np.asarray(bg) - self.bg_lin).max(), np.abs(np.asarray(ba) - self.ba_lin).max())
        return dev > threshold

    def relinearized(self, bg, ba) -> "Preintegration":
        return preintegrate(self.series, bg, ba, self.noise)


def preintegrate(samples, bg, ba, noise: ImuNoise) -> Preintegration:
    """Gravity-free accumulation of the IMU samples spanning one interval."""
    series = ImuSeries.from_samples(samples)
    if len(series) < 2:
        raise ValueError("preintegration needs at least two samples")
    series.check_order()
    bg = np.asarray(bg, dtype=float).copy()
    ba = np.asarray(ba, dtype=float).copy()
    st = _Steps(series, bg, ba)
    B, Bh = st.bias_jacobians()
    Jrs = right_jacobian(st.omega)
    Jrhs = right_jacobian(st.omega_half)

    dR = np.eye(3)
    dv = np.zeros(3)
    dp = np.zeros(3)
    cov = np.zeros((15, 15))
    J = np.zeros((9, 6))  # (theta, v, p) wrt (bg, ba)
    F = np.eye(15)
    G = np.zeros((15, 12))
    Q = np.zeros(12)
    I3 = np.eye(3)
    for k in range(len(st)):
        h = st.h[k]
        E, Eh = st.E[k], st.E_half[k]
        f0, fm, f1, Rm, R1 = st.forces(dR, k)

        # derivatives of the three rotated forces wrt (theta, bg, ba)
        Am, A1 = Rm @ skew(st.am[k]), R1 @ skew(st.a1[k])
        f_th = (-dR @ skew(st.a0[k]), -Am @ Eh.T, -A1 @ E.T)
        f_bg = (np.zeros((3, 3)), -Am @ Jrhs[k] @ Bh[k], -A1 @ Jrs[k] @ B[k])
        f_ba = (-dR, -Rm, -R1)
        v_w, p_w = (h / 6.0, 4.0 * h / 6.0, h / 6.0), (h * h / 6.0, h * h / 3.0, 0.0)

        F[:] = np.eye(15)
        F[0:3, 0:3] = E.T
        F[0:3, 9:12] = Jrs[k] @ B[k]
        F[3:6, 0:3] = sum(c * d for c, d in zip(v_w, f_th))
        F[3:6, 9:12] = sum(c * d for c, d in zip(v_w, f_bg))
        F[3:6, 12:15] = sum(c * d for c, d in zip(v_w, f_ba))
        F[6:9, 0:3] = sum(c * d for c, d in zip(p_w, f_th))
        F[6:9, 3:6] = I3 * h
        F[6:9, 9:12] = sum(c * d for c, d in zip(p_w, f_bg))
        F[6:9, 12:15] = sum(c * d for c, d in zip(p_w, f_ba))

        # white measurement noise enters like a negated bias; walks drive the biases
        G[:] = 0.0
        G[0:9, 0:6] = -F[0:9, 9:15]
        G[9:12, 6:9] = I3
        G[12:15, 9:12] = I3
        Q[0:3] = noise.gyro_noise ** 2 / h
        Q[3:6] = noise.accel_noise ** 2 / h
        Q[6:9] = noise.gyro_walk ** 2 * h
        Q[9:12] = noise.accel_walk ** 2 * h

        cov = F @ cov @ F.T + (G * Q) @ G.T
        J = F[0:9, 0:9] @ J + F[0:9, 9:15]

        dp = dp + dv * h + (h * h / 6.0) * (f0 + 2.0 * fm)
        dv = dv + (h / 6.0) * (f0 + 4.0 * fm + f1)
        dR = R1

    cov = 0.5 * (cov + cov.T)
    return Preintegration(dR, dv, dp, float(series.t[-1] - series.t[0]), cov,
                          J[:, 0:3].copy(), J[:, 3:6].copy(), bg, ba, series, noise)


def preint_residual(pre: Preintegration, xm: StateEstimate, xm1: StateEstimate,
                    noise: ImuNoise | None = None, whiten: bool = True, jacobians: bool = True):
    """Residual of a preintegration factor and its Jacobians.

    Returns ``(r, Jm, Jm1)``; Jacobians are 15x15 with respect to the tangent
    (phi, p, v, bg, ba) of each state. With ``whiten`` the residual and
    Jacobians are premultiplied by the inverse square root of the covariance.
    """
    g = (pre.noise if noise is None else noise).g
    T = pre.dt
    dbg = xm.bg - pre.bg_lin
    dR_c, dv_c, dp_c = pre.corrected(xm.bg, xm.ba)
    Rmt = xm.R.T
    M = Rmt @ xm1.R
    E = dR_c.T @ M
    r_th = so3_log(E)
    wv = Rmt @ (xm1.v - xm.v - g * T)
    wp = Rmt @ (xm1.p - xm.p - xm.v * T - 0.5 * g * T * T)
    r = np.concatenate([r_th, wv - dv_c, wp - dp_c, xm1.bg - xm.bg, xm1.ba - xm.ba])
    if not jacobians:
        return (pre.sqrt_info() @ r if whiten else r), None, None

    Jm = np.zeros((15, 15))
    Jm1 = np.zeros((15, 15))
    Jri = right_jacobian_inv(r_th)
    I3 = np.eye(3)
    Jm1[0:3, PHI] = Jri
    Jm[0:3, PHI] = -Jri @ M.T
    Jm[0:3, BG] = -Jri @ E.T @ right_jacobian(pre.J_bg[0:3] @ dbg) @ pre.J_bg[0:3]

    Jm[3:6, PHI] = skew(wv)
    Jm[3:6, VEL] = -Rmt
    Jm1[3:6, VEL] = Rmt
    Jm[3:6, BG] = -pre.J_bg[3:6]
    Jm[3:6, BA] = -pre.J_ba[3:6]

    Jm[6:9, PHI] = skew(wp)
    Jm[6:9, POS] = -Rmt
    Jm[6:9, VEL] = -Rmt * T
    Jm1[6:9, POS] = Rmt
    Jm[6:9, BG] = -pre.J_bg[6:9]
    Jm[6:9, BA] = -pre.J_ba[6:9]

    Jm[9:12, BG] = -I3
    Jm1[9:12, BG] = I3
    Jm[12:15, BA] = -I3
    Jm1[12:15, BA] = I3
    if whiten:
        W = pre.sqrt_info()
        return W @ r, W @ Jm, W @ Jm1
    return r, Jm, Jm1


def preint_residuals_batch(pres, xs, noise: ImuNoise | None = None) -> np.ndarray:
    """Whitened residuals of consecutive factors ``pres[m]`` between ``xs[m]`` and ``xs[m+1]``."""
    n = len(pres)
    if n == 0:
        return np.zeros((0, 15))
    g = (pres[0].noise if noise is None else noise).g
    T = np.array([p.dt for p in pres])[:, None]
    R = np.stack([x.R for x in xs])
    P = np.stack([x.p for x in xs])
    V = np.stack([x.v for x in xs])
    BGs = np.stack([x.bg for x in xs])
    BAs = np.stack([x.ba for x in xs])
    dbg = BGs[:-1] - np.stack([p.bg_lin for p in pres])
    dba = BAs[:-1] - np.stack([p.ba_lin for p in pres])
    Jg = np.stack([p.J_bg for p in pres])
    Ja = np.stack([p.J_ba for p in pres])
    dR = np.stack([p.dR for p in pres]) @ so3_exp(np.einsum("nij,nj->ni", Jg[:, 0:3], dbg))
    corr = np.einsum("nij,nj->ni", Jg, dbg) + np.einsum("nij,nj->ni", Ja, dba)
    dv = np.stack([p.dv for p in pres]) + corr[:, 3:6]
    dp = np.stack([p.dp for p in pres]) + corr[:, 6:9]
    Rt = np.swapaxes(R[:-1], 1, 2)
    r_th = so3_log(np.swapaxes(dR, 1, 2) @ Rt @ R[1:])
    wv = np.einsum("nij,nj->ni", Rt, V[1:] - V[:-1] - g * T)
    wp = np.einsum("nij,nj->ni", Rt, P[1:] - P[:-1] - V[:-1] * T - 0.5 * g * T * T)
    r = np.concatenate([r_th, wv - dv, wp - dp, BGs[1:] - BGs[:-1], BAs[1:] - BAs[:-1]], axis=1)
    W = np.stack([p.sqrt_info() for p in pres])
    return np.einsum("nij,nj->ni", W, r)


def static_initialization(series: ImuSeries, duration: float = 1.0, noise: ImuNoise | None = None):
    """Roll, pitch and gyro bias from a leading static window.

    Yaw is unobservable and set to zero; position and velocity start at zero.
    """
    g = GRAVITY if noise is None else noise.g
    mask = series.t <= series.t[0] + duration
    if mask.sum() < 2:
        raise ImuCoverageError("static window holds fewer than two IMU samples")
    a = series.acc[mask].mean(axis=0)
    bg = series.gyro[mask].mean(axis=0)
    # find R with R a = -g (specific force at rest points opposite to gravity)
    up_body = a / np.linalg.norm(a)
    up_world = -g / np.linalg.norm(g)
    axis = np.cross(up_body, up_world)
    s = np.linalg.norm(axis)
    c = float(np.dot(up_body, up_world))
    if s < 1e-12:
        R = np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    else:
        R = so3_exp(axis / s * np.arctan2(s, c))
    # remove the yaw component so the heading starts at zero
    yaw = np.arctan2(R[1, 0], R[0, 0])
    cz, sz = np.cos(-yaw), np.sin(-yaw)
    R = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]]) @ R
    return StateEstimate(R, np.zeros(3), np.zeros(3), bg, np.zeros(3))


__all__ = [
    "GRAVITY", "ImuCoverageError", "ImuNoise", "ImuOrderError", "ImuSample", "ImuSeries",
    "Preintegration", "PropagatedPoseSeq", "SingularCovariance", "preint_residuals_batch", "StateEstimate",
    "preint_residual", "preintegrate", "propagate", "propagate_backward", "static_initialization",
]
