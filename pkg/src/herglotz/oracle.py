"""Independent reference values: discounted closed form and exhaustive lattice search."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .caratheodory import DiscretePath
from .errors import NoAdmissiblePath, UnsupportedModel
from .model import LagrangianModel

MAX_PATHS = 10**7


def discounted_value(L0_kind: str, lam: float, x0, x1, t: float, u0: float) -> float:
    """Minimal ``u(t)`` for ``L = |v|^2/2 - lam u`` from ``x0`` to ``x1``.

    The extremal has ``xi'(s) = C exp(-lam s)``; its value is
    ``exp(-lam t) u0 + lam |x1-x0|^2 / (2 (exp(lam t) - 1))``, which tends to
    ``u0 + |x1-x0|^2 / (2t)`` as ``lam -> 0``.
    """
    if L0_kind not in ("quadratic-free", "quadratic"):
        raise UnsupportedModel(f"closed form only for quadratic L0, not {L0_kind!r}")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    d2 = float(np.sum((np.atleast_1d(np.asarray(x1, float)) - np.atleast_1d(np.asarray(x0, float))) ** 2))
    if lam == 0:
        return u0 + d2 / (2.0 * t)
    return math.exp(-lam * t) * u0 + lam * d2 / (2.0 * math.expm1(lam * t))


def discounted_extremal(lam: float, x0, x1, t: float, s):
    """Closed-form minimizer ``xi(s)`` of the discounted quadratic problem."""
    x0 = np.atleast_1d(np.asarray(x0, float))
    x1 = np.atleast_1d(np.asarray(x1, float))
    s = np.asarray(s, float)[..., None]
    if lam == 0:
        return x0 + (x1 - x0) * s / t
    return x0 + (x1 - x0) * (-np.expm1(-lam * s)) / (-math.expm1(-lam * t))


@dataclass
class BruteForceSpec:
    """Exhaustive search over velocity sequences.

    ``velocity_grid`` has shape ``(G,)`` for ``dim == 1`` or ``(G, dim)``.
    """

    n_steps: int
    velocity_grid: np.ndarray
    dim: int = 1
    substeps: int = 32

    def __post_init__(self):
        grid = np.asarray(self.velocity_grid, dtype=float)
        self.velocity_grid = grid.reshape(-1, self.dim)
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")
        if not 2 <= self.n_steps <= 6:
            raise ValueError("n_steps must lie in 2..6")
        if self.total_paths > MAX_PATHS:
            raise ValueError(f"{self.total_paths} paths exceed the limit {MAX_PATHS}")

    @classmethod
    def lattice(cls, values, n_steps, dim=1, substeps=32):
        """Product lattice of the scalar ``values`` in ``dim`` coordinates."""
        grid = np.array(list(itertools.product(values, repeat=dim)), dtype=float)
        return cls(n_steps, grid, dim, substeps)

    @property
    def total_paths(self):
        return len(self.velocity_grid) ** self.n_steps

    def spacing(self):
        out = np.empty(self.dim)
        for i in range(self.dim):
            vals = np.unique(self.velocity_grid[:, i])
            out[i] = np.min(np.diff(vals)) if len(vals) > 1 else math.inf
        return out


def _step_rk4(lag, x, dx, v, u, dt, m):
    """Vectorized RK4 across one step for many paths (rows)."""
    h = dt / m
    for j in range(m):
        xa = x + (j / m) * dx
        xh = x + ((j + 0.5) / m) * dx
        xb = x + ((j + 1) / m) * dx
        k1 = lag.eval(xa, u, v)
        k2 = lag.eval(xh, u + 0.5 * h * k1, v)
        k3 = lag.eval(xh, u + 0.5 * h * k2, v)
        k4 = lag.eval(xb, u + h * k3, v)
        u = u + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return u


def _step(lag, x, v, u, dt, m):
    # Richardson-extrapolated RK4 (m and 2m substeps)
    dx = v * dt
    coarse = _step_rk4(lag, x, dx, v, u, dt, m)
    fine = _step_rk4(lag, x, dx, v, u, dt, 2 * m)
    return fine + (fine - coarse) / 15.0


def brute_force_min(lag: LagrangianModel, spec: BruteForceSpec, x0, x1, t: float, u0: float):
    """Enumerate every velocity sequence that lands within half a lattice cell of ``x1``.

    Returns ``(action, best_path)``; ``best_path`` ends at the admissible lattice
    endpoint actually reached.  Prefixes that can no longer reach the target are
    pruned, and enumeration is chunked over the first velocity choice.
    """
    x0 = np.atleast_1d(np.asarray(x0, float))
    x1 = np.atleast_1d(np.asarray(x1, float))
    if x0.size != spec.dim or lag.dim != spec.dim:
        raise ValueError("dimension mismatch between model, spec and endpoints")
    grid = spec.velocity_grid
    dt = t / spec.n_steps
    slack = 0.5 * np.where(np.isfinite(spec.spacing()), spec.spacing(), 0.0) * dt * (1 + 1e-9) + 1e-12
    vmin, vmax = grid.min(axis=0), grid.max(axis=0)

    def reachable(x, remaining):
        lo = x + remaining * dt * vmin
        hi = x + remaining * dt * vmax
        return np.all((lo <= x1 + slack) & (hi >= x1 - slack), axis=-1)

    best_val, best_seq = math.inf, None
    G = len(grid)
    for first in range(G):
        x = x0[None, :].copy()
        u = np.array([float(u0)])
        seq = np.zeros((1, 0), dtype=int)
        v = grid[first][None, :]
        u = _step(lag, x, v, u, dt, spec.substeps)
        x = x + v * dt
        seq = np.array([[first]])
        keep = reachable(x, spec.n_steps - 1)
        x, u, seq = x[keep], u[keep], seq[keep]
        for step in range(1, spec.n_steps):
            if len(u) == 0:
                break
            P = len(u)
            xr = np.repeat(x, G, axis=0)
            ur = np.repeat(u, G)
            vr = np.tile(grid, (P, 1))
            sr = np.hstack([np.repeat(seq, G, axis=0), np.tile(np.arange(G), P)[:, None]])
            xn = xr + vr * dt
            keep = reachable(xn, spec.n_steps - 1 - step)
            xr, ur, vr, sr, xn = xr[keep], ur[keep], vr[keep], sr[keep], xn[keep]
            u = _step(lag, xr, vr, ur, dt, spec.substeps) if len(ur) else ur
            x, seq = xn, sr
        if len(u) == 0:
            continue
        ok = np.all(np.abs(x - x1) <= slack, axis=-1)
        if not np.any(ok):
            continue
        idx = np.flatnonzero(ok)
        j = idx[int(np.argmin(u[idx]))]
        if u[j] < best_val:
            best_val, best_seq = float(u[j]), seq[j]
    if best_seq is None:
        raise NoAdmissiblePath("the velocity grid cannot reach x1")
    points = x0 + np.vstack([np.zeros((1, spec.dim)), np.cumsum(grid[best_seq] * dt, axis=0)])
    return best_val - u0, DiscretePath.from_points(t, points)
