"""Levenberg-Marquardt on a manifold with dense normal equations."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SolverConfig:
    max_outer: int = 3
    max_inner: int = 8
    huber: float | None = 0.1       # metres, PTS factors only; None disables
    cost_tol: float = 1e-6          # relative cost decrease that counts as converged
    step_tol: float = 1e-9
    sigma_lidar: float = 0.05       # metres
    lambda_init: float = 1e-4
    max_rejections: int = 6
    outer_tol: float = 1e-4         # metres of knot movement between outer passes

    def __post_init__(self):
        for k in ("max_outer", "max_inner", "cost_tol", "sigma_lidar", "lambda_init", "max_rejections",
                  "outer_tol"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")
        if self.huber is not None and not self.huber > 0:
            raise ValueError("huber must be positive or None")


class SolverDivergence(RuntimeError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class SolveReport:
    costs: list = field(default_factory=list)   # cost after every accepted step, first is initial
    iterations: int = 0
    rejections: int = 0
    converged: bool = False
    reason: str = ""
    seconds: float = 0.0

    @property
    def initial_cost(self) -> float:
        return self.costs[0] if self.costs else float("nan")

    @property
    def final_cost(self) -> float:
        return self.costs[-1] if self.costs else float("nan")


def levenberg_marquardt(x0, linearize, evaluate, retract, cfg: SolverConfig, free=None,
                        max_iter: int | None = None):
    """Minimise a sum of squares.

    ``linearize(x)`` returns ``(H, g, cost)`` with ``H = J^T W J`` and
    ``g = J^T W r``; ``evaluate(x)`` returns the cost only; ``retract(x, dx)``
    applies a tangent step. ``free`` selects the optimised coordinates (the
    rest are held fixed, e.g. for gauge fixing). Steps are accepted only when
    they strictly lower the cost. Running out of consecutive rejections ends
    the solve as converged, since it only happens once no descent step of any
    damping can be found; a non-finite cost raises :class:`SolverDivergence`.
    """
    t0 = time.perf_counter()
    max_iter = cfg.max_inner if max_iter is None else max_iter
    rep = SolveReport()
    x = x0
    H, g, cost = linearize(x)
    if not np.isfinite(cost):
        raise SolverDivergence("non-finite initial cost", x0)
    rep.costs.append(cost)
    n = len(g)
    free = np.arange(n) if free is None else np.asarray(free)
    lam = cfg.lambda_init
    rejections = 0
    while rep.iterations < max_iter:
        Hf = H[np.ix_(free, free)]
        gf = g[free]
        if not np.any(gf):
            rep.converged, rep.reason = True, "zero gradient"
            break
        diag = np.diag(Hf).copy()
        damp = lam * np.maximum(diag, 1e-9) + 1e-12
        try:
            step = np.linalg.solve(Hf + np.diag(damp), -gf)
        except np.linalg.LinAlgError:
            step = None
        if step is None or not np.all(np.isfinite(step)):
            lam *= 10.0
            rejections += 1
            rep.rejections += 1
            if rejections > cfg.max_rejections:
                rep.converged, rep.reason = True, "rejection budget"
                break
            continue
        dx = np.zeros(n)
        dx[free] = step
        x_new = retract(x, dx)
        c_new = evaluate(x_new)
        rep.iterations += 1
        if not np.isfinite(c_new):
            raise SolverDivergence("non-finite cost during optimisation", x)
        if c_new < cost:
            decrease = (cost - c_new) / max(cost, 1e-300)
            x, cost = x_new, c_new
            rep.costs.append(cost)
            lam = max(lam / 10.0, 1e-12)
            rejections = 0
            if decrease < cfg.cost_tol or np.linalg.norm(step) < cfg.step_tol:
                rep.converged, rep.reason = True, "small decrease"
                break
            H, g, cost = linearize(x)
        else:
            lam *= 10.0
            rejections += 1
            rep.rejections += 1
            if rejections > cfg.max_rejections:
                rep.converged, rep.reason = True, "rejection budget"
                break
    else:
        rep.reason = "iteration limit"
    rep.seconds = time.perf_counter() - t0
    return x, rep
