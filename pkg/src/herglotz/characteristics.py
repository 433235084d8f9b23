"""Lie (contact characteristic) equations and two-point shooting.

The flow integrates ``x' = H_p``, ``p' = -H_x - H_u p``, ``u' = p . H_p - H``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .caratheodory import CaratheodoryTrace, DiscretePath
from .errors import NonFinite, RefinementWarning, ShootingDivergence
from .model import HamiltonianModel, LagrangianModel

FLOW_TOL = 1e-9


@dataclass(frozen=True)
class ContactState:
    x: np.ndarray
    p: np.ndarray
    u: float

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        object.__setattr__(self, "p", np.atleast_1d(np.asarray(self.p, dtype=float)))
        object.__setattr__(self, "u", float(self.u))
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.p)) and math.isfinite(self.u)):
            raise NonFinite("contact state has non-finite coordinates")


@dataclass
class Orbit:
    s: np.ndarray
    x: np.ndarray
    p: np.ndarray
    u: np.ndarray
    H: np.ndarray
    Hu: np.ndarray
    error_estimate: float
    refined: bool

    def states(self):
        return [ContactState(x, p, u) for x, p, u in zip(self.x, self.p, self.u)]

    def __getitem__(self, i):
        return ContactState(self.x[i], self.p[i], self.u[i])

    def __len__(self):
        return len(self.s)

    @property
    def final(self):
        return self[-1]


def _rhs(ham, n, z):
    x, p, u = z[:n], z[n : 2 * n], z[2 * n]
    H, Hx, Hu, Hp = ham.all(x, u, p)
    dz = np.empty_like(z)
    dz[:n] = Hp
    dz[n : 2 * n] = -np.asarray(Hx) - Hu * p
    dz[2 * n] = p @ Hp - H
    return dz


def _integrate(ham, z0, t, steps, keep=True):
    n = ham.dim
    h = t / steps
    z = z0.copy()
    out = [z.copy()] if keep else None
    for _ in range(steps):
        k1 = _rhs(ham, n, z)
        k2 = _rhs(ham, n, z + 0.5 * h * k1)
        k3 = _rhs(ham, n, z + 0.5 * h * k2)
        k4 = _rhs(ham, n, z + h * k3)
        z = z + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(z)):
            raise NonFinite("contact flow blew up")
        if keep:
            out.append(z.copy())
    return np.asarray(out) if keep else z


def _pack(state):
    return np.concatenate([state.x, state.p, [state.u]])


def flow(ham: HamiltonianModel, s0: ContactState, t: float, steps: int = 256, check: bool = True) -> Orbit:
    """Integrate the Lie equations from ``s0`` for time ``t`` with ``steps`` RK4 steps.

    With ``check`` the final state is compared against a run with twice the
    steps; an estimate above 1e-9 sets ``refined=False`` and warns.
    """
    if steps < 1:
        raise ValueError("steps must be positive")
    n = ham.dim
    z0 = _pack(s0)
    if t == 0:
        zs = np.repeat(z0[None], steps + 1, axis=0)
        est = 0.0
    else:
        zs = _integrate(ham, z0, t, steps)
        est = 0.0
        if check:
            fine = _integrate(ham, z0, t, 2 * steps, keep=False)
            est = float(np.max(np.abs(fine - zs[-1]))) / 15.0
    x, p, u = zs[:, :n], zs[:, n : 2 * n], zs[:, 2 * n]
    HH = np.array([ham.all(xi, ui, pi)[:3:2] for xi, pi, ui in zip(x, p, u)])
    ok = est <= FLOW_TOL
    if not ok:
        warnings.warn(f"flow step-halving estimate {est:.2e} exceeds {FLOW_TOL:g}", RefinementWarning, stacklevel=2)
    return Orbit(np.linspace(0.0, t, steps + 1), x, p, u, HH[:, 0], HH[:, 1], est, ok)


def shoot(
    ham: HamiltonianModel,
    x0,
    x1,
    t: float,
    u0: float,
    p_init=None,
    steps: int = 256,
    max_newton: int = 50,
):
    """Find ``p0`` so the flow from ``(x0, p0, u0)`` reaches ``x1`` at time ``t``.

    Damped Newton on the shooting map with a forward-difference Jacobian.
    Returns ``(orbit, p0)``.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    x0 = np.atleast_1d(np.asarray(x0, float))
    x1 = np.atleast_1d(np.asarray(x1, float))
    n = x0.size
    p = (x1 - x0) / t if p_init is None else np.atleast_1d(np.asarray(p_init, float)).copy()
    tol = 1e-9 * (1.0 + np.linalg.norm(x1))

    def miss(q):
        z = _integrate(ham, np.concatenate([x0, q, [u0]]), t, steps, keep=False)
        return z[:n] - x1

    try:
        F = miss(p)
    except NonFinite as exc:
        raise ShootingDivergence("flow blew up at the initial covector") from exc
    for _ in range(max_newton):
        if np.linalg.norm(F) <= tol:
            return flow(ham, ContactState(x0, p, u0), t, steps), p
        J = np.empty((n, n))
        for i in range(n):
            dp = 1e-7 * (1.0 + abs(p[i]))
            q = p.copy()
            q[i] += dp
            J[:, i] = (miss(q) - F) / dp
        try:
            step = -np.linalg.solve(J, F)
        except np.linalg.LinAlgError as exc:
            raise ShootingDivergence("singular shooting Jacobian") from exc
        lam = 1.0
        while lam > 1e-6:
            try:
                Fn = miss(p + lam * step)
                if np.linalg.norm(Fn) < np.linalg.norm(F):
                    break
            except NonFinite:
                pass
            lam *= 0.5
        else:
            raise ShootingDivergence("no damped Newton step reduces the endpoint miss")
        p = p + lam * step
        F = Fn
    if np.linalg.norm(F) <= tol:
        return flow(ham, ContactState(x0, p, u0), t, steps), p
    raise ShootingDivergence(f"shooting did not converge in {max_newton} Newton steps")


def shoot_multistart(ham, x0, x1, t, u0, p_inits, steps=256, distinct_tol=1e-6):
    """Shoot from every initial covector; return distinct solutions sorted by terminal ``u``."""
    found = []
    for q in p_inits:
        try:
            orbit, p0 = shoot(ham, x0, x1, t, u0, q, steps)
        except ShootingDivergence:
            continue
        if all(np.linalg.norm(p0 - other) > distinct_tol for _, other in found):
            found.append((orbit, p0))
    found.sort(key=lambda item: item[0].u[-1])
    return found


def dual_arc(lag: LagrangianModel, path: DiscretePath, trace: CaratheodoryTrace) -> np.ndarray:
    """``p = L_v(xi, u, xi')`` at the cell midpoints, shape ``(N, n)``."""
    mids = path.midpoints()
    return np.asarray(lag.grad_v(mids, trace.u_mid, path.velocities()), dtype=float)


def initial_covector(p_mid: np.ndarray) -> np.ndarray:
    """Linear extrapolation of midpoint covectors to ``s = 0``."""
    return 1.5 * p_mid[0] - 0.5 * p_mid[1]


def energy_drift(orbit: Orbit) -> float:
    """``|H(t) - H(0) - int_0^t (-H_u H) ds|`` with composite Simpson (trapezoid for odd counts)."""
    f = -orbit.Hu * orbit.H
    return abs(orbit.H[-1] - orbit.H[0] - _quad(orbit.s, f))


def action_drift(orbit: Orbit, ham: HamiltonianModel) -> float:
    """``|u(t) - u(0) - int (p . H_p - H)|`` along the samples."""
    Hp = np.array([ham.all(x, u, p)[3] for x, p, u in zip(orbit.x, orbit.p, orbit.u)])
    f = np.sum(orbit.p * Hp, axis=1) - orbit.H
    return abs(orbit.u[-1] - orbit.u[0] - _quad(orbit.s, f))


def _quad(s, f):
    m = len(s) - 1
    if m >= 2 and m % 2 == 0:
        h = s[1] - s[0]
        return float(h / 3.0 * (f[0] + f[-1] + 4.0 * f[1:-1:2].sum() + 2.0 * f[2:-1:2].sum()))
    return float(np.trapz(f, s))


def write_orbit_csv(fp, orbit: Orbit):
    """Columns ``s, x..., p..., u, H``."""
    n = orbit.x.shape[1]
    w = csv.writer(fp, lineterminator="\n")
    w.writerow(["s"] + [f"x{i}" for i in range(n)] + [f"p{i}" for i in range(n)] + ["u", "H"])
    for i in range(len(orbit.s)):
        row = [orbit.s[i], *orbit.x[i], *orbit.p[i], orbit.u[i], orbit.H[i]]
        w.writerow([repr(float(v)) for v in row])
