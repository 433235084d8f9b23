"""Piecewise-linear paths and the Carathéodory equation ``u' = L(xi, u, xi')``."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFinite
from .model import LagrangianModel

MIN_SUBSTEPS = 4
MAX_SUBSTEPS = 1 << 14


@dataclass
class DiscretePath:
    """Piecewise-linear path on the uniform grid ``s_k = k t / N``.

    ``nodes`` holds the N-1 interior points; ``x0`` and ``x1`` are nodes 0 and N.
    """

    t_final: float
    x0: np.ndarray
    x1: np.ndarray
    nodes: np.ndarray

    def __post_init__(self):
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        self.x1 = np.atleast_1d(np.asarray(self.x1, dtype=float))
        n = self.x0.size
        self.nodes = np.asarray(self.nodes, dtype=float).reshape(-1, n)
        if not self.t_final > 0:
            raise ValueError("t_final must be positive")
        if self.x1.shape != self.x0.shape:
            raise ValueError("endpoints must have equal dimension")
        if self.N < 2:
            raise ValueError("a path needs at least two cells")

    @classmethod
    def straight(cls, x0, x1, t_final, N):
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        x1 = np.atleast_1d(np.asarray(x1, dtype=float))
        frac = np.arange(1, N)[:, None] / N
        return cls(t_final, x0, x1, x0 + frac * (x1 - x0))

    @classmethod
    def from_points(cls, t_final, points):
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        return cls(t_final, points[0], points[-1], points[1:-1])

    @property
    def dim(self):
        return self.x0.size

    @property
    def N(self):
        return len(self.nodes) + 1

    @property
    def h(self):
        return self.t_final / self.N

    def points(self):
        return np.vstack([self.x0[None], self.nodes, self.x1[None]])

    def times(self):
        return np.arange(self.N + 1) * self.h

    def velocities(self):
        return np.diff(self.points(), axis=0) / self.h

    def midpoints(self):
        pts = self.points()
        return 0.5 * (pts[1:] + pts[:-1])

    def with_nodes(self, nodes):
        return DiscretePath(self.t_final, self.x0, self.x1, nodes)

    def length(self):
        return float(np.sum(np.linalg.norm(np.diff(self.points(), axis=0), axis=1)))

    def __call__(self, s):
        """Evaluate the interpolant at times ``s``."""
        s = np.asarray(s, dtype=float)
        pts = self.points()
        grid = self.times()
        return np.stack([np.interp(s, grid, pts[:, i]) for i in range(self.dim)], axis=-1)


@dataclass
class CaratheodoryTrace:
    u: np.ndarray
    u0: float
    action: float
    steps_accepted: int
    steps_rejected: int
    max_step_error: float
    substeps: np.ndarray
    # u at cell midpoints (midpoints are substep nodes since substep counts are even)
    u_mid: np.ndarray = field(repr=False, default=None)
    # per-cell RK4 increments; their sum is the action
    increments: np.ndarray = field(repr=False, default=None)
    t_final: float = 1.0

    @property
    def N(self):
        return len(self.u) - 1

    def times(self):
        return np.linspace(0.0, self.t_final, self.N + 1)


@dataclass
class StageRecord:
    """Stage data of a fixed-substep forward pass, consumed by the adjoint."""

    cell: np.ndarray
    frac: np.ndarray
    u: np.ndarray
    substeps: np.ndarray


def _rk4_cell(lag, xa, dx, v, H, u, m, alpha, rec=None, cell=0):
    """Advance ``u`` across one cell with ``m`` RK4 substeps.

    Returns ``(u_end, u_mid, increment)``; ``u_mid`` is ``nan`` for odd ``m``.
    """
    hs = H / m
    inv = 1.0 / m
    veff = v / alpha if alpha != 1.0 else v
    L = lag.eval
    # substep nodes and midpoints: x at fractions 0, 1/2m, ..., 1
    xs = xa + (np.arange(2 * m + 1) * (0.5 * inv))[:, None] * dx
    start = u
    u_mid = math.nan
    for j in range(m):
        xh = xs[2 * j + 1]
        k1 = alpha * L(xs[2 * j], u, veff)
        u2 = u + 0.5 * hs * k1
        k2 = alpha * L(xh, u2, veff)
        u3 = u + 0.5 * hs * k2
        k3 = alpha * L(xh, u3, veff)
        u4 = u + hs * k3
        k4 = alpha * L(xs[2 * j + 2], u4, veff)
        if rec is not None:
            f0 = j * inv
            rec.append((cell, f0, f0 + 0.5 * inv, f0 + 0.5 * inv, f0 + inv, u, u2, u3, u4))
        u = u + hs / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not math.isfinite(u):
            raise NonFinite(f"Lagrangian is not finite along cell {cell}")
        if 2 * (j + 1) == m:
            u_mid = u
    return float(u), u_mid, float(u - start)


def _prepare(path, alpha):
    pts = path.points()
    dxs = np.diff(pts, axis=0)
    H = path.h
    if alpha is None:
        alpha = np.ones(path.N)
    return pts, dxs, dxs / H, H, np.asarray(alpha, dtype=float)


def solve(
    lag: LagrangianModel,
    path: DiscretePath,
    u0: float,
    tol: float = 1e-10,
    substeps=None,
    alpha=None,
    record: list | None = None,
) -> CaratheodoryTrace:
    """Solve the Carathéodory equation along ``path`` with ``u(0) = u0``.

    Without ``substeps`` each cell starts at four RK4 substeps and doubles
    until the Richardson estimate ``|u_2M - u_M| / 15`` is at most
    ``tol * (1 + |u|)``; the finer solution is kept.  With ``substeps`` the
    given per-cell counts are used as is (no estimate), which makes the
    discrete action a smooth function of the nodes.

    ``alpha`` (per-cell, positive) solves the time-reparametrized equation
    ``u' = alpha L(xi, u, xi'/alpha)`` instead.
    """
    u0 = float(u0)
    pts, dxs, vs, H, alpha = _prepare(path, alpha)
    N = path.N
    u = np.empty(N + 1)
    u_mid = np.empty(N)
    inc = np.empty(N)
    used = np.empty(N, dtype=int)
    u[0] = u0
    accepted = rejected = 0
    max_err = 0.0
    for k in range(N):
        a = float(alpha[k])
        if substeps is not None:
            m = int(substeps[k])
            u[k + 1], u_mid[k], inc[k] = _rk4_cell(lag, pts[k], dxs[k], vs[k], H, u[k], m, a, record, k)
            used[k] = m
            accepted += m
            continue
        m = MIN_SUBSTEPS
        coarse = _rk4_cell(lag, pts[k], dxs[k], vs[k], H, u[k], m, a, None, k)
        while True:
            fine = _rk4_cell(lag, pts[k], dxs[k], vs[k], H, u[k], 2 * m, a, None, k)
            err = abs(fine[0] - coarse[0]) / 15.0
            if err <= tol * (1.0 + abs(fine[0])) or 2 * m >= MAX_SUBSTEPS:
                break
            rejected += m
            m *= 2
            coarse = fine
        u[k + 1], u_mid[k], inc[k] = fine
        used[k] = 2 * m
        accepted += 2 * m
        max_err = max(max_err, err)
    return CaratheodoryTrace(
        u=u,
        u0=u0,
        action=float(u[N] - u0),
        steps_accepted=accepted,
        steps_rejected=rejected,
        max_step_error=max_err,
        substeps=used,
        u_mid=u_mid,
        increments=inc,
        t_final=path.t_final,
    )


def stage_record(lag, path, u0, substeps, alpha=None):
    """Forward pass with fixed substeps that also returns per-stage data."""
    rows = []
    trace = solve(lag, path, u0, substeps=substeps, alpha=alpha, record=rows)
    arr = np.asarray(rows, dtype=float).reshape(-1, 9)
    rec = StageRecord(
        cell=arr[:, 0].astype(int),
        frac=arr[:, 1:5],
        u=arr[:, 5:9],
        substeps=np.asarray(substeps, dtype=int),
    )
    return trace, rec


def lagrangian_along(lag, path, trace):
    """``L`` at the nodes, using the velocity of the cell to the right (left at s=t)."""
    pts = path.points()
    vs = path.velocities()
    vnode = np.vstack([vs, vs[-1:]])
    return np.asarray(lag.eval(pts, trace.u, vnode), dtype=float)


# ---------------------------------------------------------------------------
# a-priori bounds
# ---------------------------------------------------------------------------


@dataclass
class BoundReport:
    passed: bool
    margin: float
    witness: int
    bound: float | np.ndarray | None = None


def check_lower_bound(trace: CaratheodoryTrace, lag: LagrangianModel) -> BoundReport:
    """Check ``u(s) >= -exp(K s) (|u0| + c0 s)`` at every node."""
    s = trace.times()
    floor = -np.exp(lag.K * s) * (abs(trace.u0) + lag.c0 * s)
    margins = trace.u - floor
    k = int(np.argmin(margins))
    return BoundReport(bool(margins[k] >= -1e-9), float(margins[k]), k, floor)


def upper_bound_value(lag: LagrangianModel, t: float, R: float, u0: float, eps: float = 1.0) -> float:
    """``t (kappa(R/t) + K|u0|) e^{Kt} + eps`` with ``kappa = theta0_bar + 2 c0``."""
    kappa = float(lag.theta0_bar(R / t)) + 2.0 * lag.c0
    return t * (kappa + lag.K * abs(u0)) * math.exp(lag.K * t) + eps


def check_upper_bound(trace: CaratheodoryTrace, lag: LagrangianModel, R: float, eps: float = 1.0) -> BoundReport:
    """Check ``u(t) - u0`` against the straight-line comparison bound.

    The caller asserts that the path is within ``eps`` of optimal for its endpoints.
    """
    bound = upper_bound_value(lag, trace.t_final, R, trace.u0, eps)
    margin = bound - trace.action
    return BoundReport(bool(margin >= -1e-9), float(margin), trace.N, bound)


def write_trace_csv(fp, lag, path, trace):
    """Write columns ``s, u, L`` (one row per node)."""
    Ls = lagrangian_along(lag, path, trace)
    w = csv.writer(fp, lineterminator="\n")
    w.writerow(["s", "u", "L"])
    for s, u, L in zip(trace.times(), trace.u, Ls):
        w.writerow([repr(float(s)), repr(float(u)), repr(float(L))])
