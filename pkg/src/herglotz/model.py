"""Contact Lagrangians, their Hamiltonians and the standing-assumption checks.

A :class:`LagrangianModel` bundles ``L(x, u, v)`` with its first partials and
``L_vv``.  All callables broadcast over leading axes: ``x`` and ``v`` have
shape ``(..., n)`` and ``u`` has shape ``(...)``.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NonConvergence, SingularHessian, UnsupportedModel

Array = np.ndarray

NEWTON_MAX_ITERS = 100
HESSIAN_COND_MAX = 1e12


@dataclass(frozen=True)
class Envelope:
    """Growth envelope ``coef * r**power + const``."""

    coef: float
    power: float
    const: float = 0.0

    def __post_init__(self):
        if self.power <= 1.0:
            raise ValueError("envelope power must exceed 1 (superlinear)")
        if self.coef <= 0.0:
            raise ValueError("envelope coefficient must be positive")

    def __call__(self, r):
        return self.coef * np.asarray(r, dtype=float) ** self.power + self.const

    @classmethod
    def parse(cls, text: str) -> "Envelope":
        """Parse ``"power(a,q)"`` or ``"power(a,q)+b"``."""
        m = re.fullmatch(
            r"\s*power\(\s*([-+0-9.eE]+)\s*,\s*([-+0-9.eE]+)\s*\)\s*(?:\+\s*([-+0-9.eE]+))?\s*",
            text,
        )
        if m is None:
            raise ValueError(f"cannot parse envelope {text!r}")
        return cls(float(m.group(1)), float(m.group(2)), float(m.group(3) or 0.0))

    def __str__(self):
        s = f"power({self.coef:g},{self.power:g})"
        return s + (f"+{self.const:g}" if self.const else "")


@dataclass
class LagrangianModel:
    dim: int
    eval: Callable
    grad_x: Callable
    grad_v: Callable
    du: Callable
    hess_vv: Callable
    K: float
    c0: float
    theta0: Envelope
    theta0_bar: Envelope
    name: str = "custom"
    params: dict = field(default_factory=dict)
    # set for registry-built models so worker processes can rebuild them
    registry_key: tuple | None = None

    def __call__(self, x, u, v):
        return self.eval(x, u, v)

    def partials(self, x, u, v):
        """Return ``(L, L_x, L_u, L_v)`` at the given (possibly batched) points."""
        return self.eval(x, u, v), self.grad_x(x, u, v), self.du(x, u, v), self.grad_v(x, u, v)


@dataclass
class HamiltonianModel:
    dim: int
    eval: Callable
    grad_x: Callable
    grad_p: Callable
    du: Callable
    hess_pp: Callable | None = None
    # one call returning (H, H_x, H_u, H_p); avoids repeating inner solves
    full: Callable | None = None
    name: str = "custom"

    def all(self, x, u, p):
        if self.full is not None:
            return self.full(x, u, p)
        return self.eval(x, u, p), self.grad_x(x, u, p), self.du(x, u, p), self.grad_p(x, u, p)


# ---------------------------------------------------------------------------
# Legendre transform
# ---------------------------------------------------------------------------


def _conjugate(f, grad, hess, p, v0):
    """Maximize ``<p,v> - f(v)`` by damped Newton with Armijo backtracking."""
    p = np.asarray(p, dtype=float)
    v = np.array(v0, dtype=float)
    tol = 1e-10 * (1.0 + np.linalg.norm(p))

    def phi(w):
        return f(w) - p @ w

    val = phi(v)
    g = grad(v) - p
    for _ in range(NEWTON_MAX_ITERS):
        gnorm = np.linalg.norm(g)
        if not np.isfinite(gnorm):
            raise NonConvergence("non-finite gradient in Legendre transform")
        if gnorm <= tol:
            return -val, v
        h = np.atleast_2d(hess(v))
        if np.linalg.cond(h) > HESSIAN_COND_MAX:
            raise SingularHessian(f"L_vv condition number exceeds {HESSIAN_COND_MAX:g}")
        d = -np.linalg.solve(h, g)
        slope = g @ d
        alpha = 1.0
        while True:
            w = v + alpha * d
            wval = phi(w)
            wg = grad(w) - p
            # second clause keeps progress when values sit at roundoff
            if wval <= val + 1e-4 * alpha * slope or np.linalg.norm(wg) < gnorm:
                break
            alpha *= 0.5
            if alpha < 1e-12:
                raise NonConvergence("Armijo backtracking failed in Legendre transform")
        v, val, g = w, wval, wg
    raise NonConvergence(f"Legendre transform did not converge in {NEWTON_MAX_ITERS} iterations")


def _initial_velocity(lag, x, u, p):
    # one Newton step of the inner problem from v = 0
    zero = np.zeros(lag.dim)
    h = np.atleast_2d(lag.hess_vv(x, u, zero))
    try:
        return np.linalg.solve(h, np.asarray(p, float) - lag.grad_v(x, u, zero))
    except np.linalg.LinAlgError:
        return zero


def legendre_transform(lag: LagrangianModel, x, u, p, v_init=None):
    """Return ``(H(x,u,p), argmax_v)`` where ``H = sup_v <p,v> - L(x,u,v)``."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    u = float(u)
    if v_init is None:
        v_init = _initial_velocity(lag, x, u, p)
    v_init = np.asarray(v_init, dtype=float)
    if not np.all(np.isfinite(v_init)):
        raise ValueError("v_init must be finite")
    return _conjugate(
        lambda v: lag.eval(x, u, v),
        lambda v: lag.grad_v(x, u, v),
        lambda v: lag.hess_vv(x, u, v),
        p,
        v_init,
    )


def _pointwise(fn, dim, out_shape):
    """Lift a single-point function of (x,u,p) to broadcast over leading axes."""

    def lifted(x, u, p):
        x = np.asarray(x, float)
        p = np.asarray(p, float)
        u = np.asarray(u, float)
        lead = np.broadcast_shapes(x.shape[:-1], u.shape, p.shape[:-1])
        if not lead:
            return fn(x, float(u), p)
        xb = np.broadcast_to(x, lead + (dim,)).reshape(-1, dim)
        pb = np.broadcast_to(p, lead + (dim,)).reshape(-1, dim)
        ub = np.broadcast_to(u, lead).reshape(-1)
        res = np.array([fn(xi, ui, pi) for xi, ui, pi in zip(xb, ub, pb)])
        return res.reshape(lead + out_shape)

    return lifted


def make_hamiltonian(lag: LagrangianModel) -> HamiltonianModel:
    """Build ``H`` from ``L`` by numerical Legendre transform.

    Partials use the envelope formulas ``H_x = -L_x``, ``H_u = -L_u`` and
    ``H_p = argmax`` evaluated at the maximizing velocity.
    """
    n = lag.dim

    def solve(x, u, p):
        return legendre_transform(lag, x, u, p)

    def h(x, u, p):
        return solve(x, u, p)[0]

    def hx(x, u, p):
        return -lag.grad_x(x, u, solve(x, u, p)[1])

    def hp(x, u, p):
        return solve(x, u, p)[1]

    def hu(x, u, p):
        return -lag.du(x, u, solve(x, u, p)[1])

    def hpp(x, u, p):
        return np.linalg.inv(np.atleast_2d(lag.hess_vv(x, u, solve(x, u, p)[1])))

    def full(x, u, p):
        val, v = solve(np.asarray(x, float), float(u), np.asarray(p, float))
        return val, -lag.grad_x(x, u, v), -float(lag.du(x, u, v)), v

    return HamiltonianModel(
        dim=n,
        eval=_pointwise(h, n, ()),
        grad_x=_pointwise(hx, n, (n,)),
        grad_p=_pointwise(hp, n, (n,)),
        du=_pointwise(hu, n, ()),
        hess_pp=_pointwise(hpp, n, (n, n)),
        full=full,
        name=f"H[{lag.name}]",
    )


# ---------------------------------------------------------------------------
# Condition checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned sampling region; each bound applies to every coordinate."""

    x: tuple[float, float] = (-1.0, 1.0)
    u: tuple[float, float] = (-1.0, 1.0)
    v: tuple[float, float] = (-1.0, 1.0)


@dataclass
class ConditionResult:
    name: str
    passed: bool
    worst: float
    witness: tuple | None = None
    detail: dict = field(default_factory=dict)


@dataclass
class ConditionReport:
    results: dict[str, ConditionResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def __getitem__(self, key):
        return self.results[key]

    def summary(self) -> dict:
        return {k: r.passed for k, r in self.results.items()}


def _sample_points(lag, box, n_samples, seed):
    n = lag.dim
    rng = np.random.default_rng(seed)
    lo = np.array([box.x[0]] * n + [box.u[0]] + [box.v[0]] * n)
    hi = np.array([box.x[1]] * n + [box.u[1]] + [box.v[1]] * n)
    pts = lo + (hi - lo) * rng.random((n_samples, 2 * n + 1))
    if 2 * n + 1 <= 9:
        corners = np.array(list(itertools.product(*zip(lo, hi))))
        pts = np.vstack([pts, corners])
    return pts[:, :n], pts[:, n], pts[:, n + 1 :]


def _witness(x, u, v, i):
    return (x[i].tolist(), float(u[i]), v[i].tolist())


def check_partials(lag, x, u, v, rel_tol=1e-5):
    """Compare analytic partials with central differences at the given points.

    Returns the worst scaled discrepancy and its index.
    """
    n = lag.dim
    L, Lx, Lu, Lv = lag.partials(x, u, v)
    worst, where = 0.0, 0

    def fd(shift_x, shift_u, shift_v, hstep):
        return (
            lag.eval(x + shift_x, u + shift_u, v + shift_v)
            - lag.eval(x - shift_x, u - shift_u, v - shift_v)
        ) / (2 * hstep)

    hx = 1e-5 * np.maximum(1.0, np.abs(x))
    hv = 1e-5 * np.maximum(1.0, np.abs(v))
    hu = 1e-5 * np.maximum(1.0, np.abs(u))
    checks = []
    for i in range(n):
        e = np.zeros_like(x)
        e[:, i] = hx[:, i]
        checks.append((Lx[:, i], fd(e, 0.0, 0.0, hx[:, i])))
        e = np.zeros_like(v)
        e[:, i] = hv[:, i]
        checks.append((Lv[:, i], fd(0.0, 0.0, e, hv[:, i])))
    checks.append((Lu, fd(0.0, hu, 0.0, hu)))
    for analytic, numeric in checks:
        err = np.abs(analytic - numeric) / (1.0 + np.abs(numeric))
        i = int(np.argmax(err))
        if err[i] > worst:
            worst, where = float(err[i]), i
    return worst, where


def check_conditions(lag: LagrangianModel, sample_box: Box = Box(), n_samples: int = 1000, seed: int = 0):
    """Sample the box and report (L1), (L2), (L3), (L2') and partial-derivative checks.

    Failures are reported, never raised.  The (L2') constant is the empirical
    maximum of ``L(x,0,rv) / (1 + L(x,0,v))`` over the samples and
    ``r in {1, 1.25, 1.5}``; it is an estimate for this box only.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    x, u, v = _sample_points(lag, sample_box, n_samples, seed)
    results = {}

    # (L1)
    hs = np.asarray(lag.hess_vv(x, u, v)).reshape(len(u), lag.dim, lag.dim)
    asym = np.max(np.abs(hs - np.swapaxes(hs, -1, -2)), axis=(-1, -2))
    mins = np.linalg.eigvalsh(0.5 * (hs + np.swapaxes(hs, -1, -2)))[:, 0]
    i = int(np.argmin(mins))
    results["L1"] = ConditionResult(
        "L1", bool(mins[i] > 0 and np.all(asym <= 1e-10 * (1 + np.abs(hs).max()))), float(mins[i]), _witness(x, u, v, i)
    )

    # (L2)
    zero = np.zeros_like(u)
    L0 = lag.eval(x, zero, v)
    r = np.linalg.norm(v, axis=-1)
    upper = lag.theta0_bar(r) - L0
    lower = L0 - (lag.theta0(r) - lag.c0)
    slack = np.minimum(upper, lower)
    tol = 1e-12 * (1 + np.abs(L0))
    i = int(np.argmin(slack + tol))
    results["L2"] = ConditionResult("L2", bool(np.all(slack >= -tol)), float(slack[i]), _witness(x, u, v, i))

    # (L3)
    Lu = np.abs(lag.du(x, u, v))
    i = int(np.argmax(Lu))
    results["L3"] = ConditionResult(
        "L3", bool(Lu[i] <= lag.K * (1 + 1e-12) + 1e-14), float(Lu[i]), _witness(x, u, v, i), {"K": lag.K}
    )

    # (L2')
    denom = 1.0 + L0
    c_a, wit, ok = -math.inf, None, True
    for scale in (1.0, 1.25, 1.5):
        num = lag.eval(x, zero, scale * v)
        good = denom > 1e-12
        if np.any(~good & (num > 0)):
            ok = False
            j = int(np.argmax(~good & (num > 0)))
            wit = _witness(x, u, scale * v, j)
            c_a = math.inf
            break
        ratio = np.where(good, num / np.where(good, denom, 1.0), -math.inf)
        j = int(np.argmax(ratio))
        if ratio[j] > c_a:
            c_a, wit = float(ratio[j]), _witness(x, u, v, j) + (scale,)
    results["L2'"] = ConditionResult("L2'", ok and math.isfinite(c_a), c_a, wit, {"C_A": c_a})

    worst, i = check_partials(lag, x, u, v)
    results["partials"] = ConditionResult("partials", worst <= 1e-5, worst, _witness(x, u, v, i))
    return ConditionReport(results)


# ---------------------------------------------------------------------------
# Built-in models
# ---------------------------------------------------------------------------


def _sq(v):
    return np.sum(v * v, axis=-1) if v.ndim > 1 else float(v @ v)


def _eye(v, dim):
    v = np.asarray(v)
    return np.broadcast_to(np.eye(dim), v.shape[:-1] + (dim, dim)).copy()


def _potential(amplitude):
    """``V(x) = amplitude * cos(x_1)`` and its gradient."""

    if amplitude == 0.0:
        return (lambda x: 0.0), (lambda x: np.zeros(np.shape(x)))

    def V(x):
        return amplitude * np.cos(x[..., 0])

    def dV(x):
        g = np.zeros(np.shape(x))
        g[..., 0] = -amplitude * np.sin(x[..., 0])
        return g

    return V, dV


def quadratic_free(dim: int = 1) -> LagrangianModel:
    q = Envelope(0.5, 2.0)
    return LagrangianModel(
        dim=dim,
        eval=lambda x, u, v: 0.5 * _sq(np.asarray(v)),
        grad_x=lambda x, u, v: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(v))),
        grad_v=lambda x, u, v: np.array(v, dtype=float),
        du=lambda x, u, v: np.zeros(np.broadcast_shapes(np.shape(u), np.shape(v)[:-1]))
        if np.ndim(v) > 1
        else 0.0,
        hess_vv=lambda x, u, v: _eye(v, dim),
        K=0.0,
        c0=0.0,
        theta0=q,
        theta0_bar=q,
        name="quadratic-free",
        params={"dim": dim},
    )


def _kinetic_family(name, dim, amplitude, coupling, dcoupling, K, params):
    """``L = |v|^2/2 - V(x) + coupling(u)`` with ``V = amplitude cos x_1``."""
    V, dV = _potential(amplitude)
    c0 = abs(amplitude)

    def ev(x, u, v):
        return 0.5 * _sq(np.asarray(v)) - V(np.asarray(x)) + coupling(np.asarray(u, float) if np.ndim(u) else u)

    def gx(x, u, v):
        return -dV(np.asarray(x, float) + 0.0 * np.asarray(v))

    def gu(x, u, v):
        x = np.asarray(x)
        shape = np.broadcast_shapes(np.shape(u), x.shape[:-1], np.shape(v)[:-1])
        val = dcoupling(np.asarray(u, float))
        return float(val) if not shape else np.broadcast_to(val, shape).astype(float)

    return LagrangianModel(
        dim=dim,
        eval=ev,
        grad_x=gx,
        grad_v=lambda x, u, v: np.array(v, dtype=float),
        du=gu,
        hess_vv=lambda x, u, v: _eye(v, dim),
        K=K,
        c0=c0,
        theta0=Envelope(0.5, 2.0),
        theta0_bar=Envelope(0.5, 2.0, c0),
        name=name,
        params=params,
    )


def mechanical(dim: int = 1, amplitude: float = 1.0) -> LagrangianModel:
    """``L = |v|^2/2 - amplitude * cos(x_1)``."""
    return _kinetic_family(
        "mechanical",
        dim,
        amplitude,
        lambda u: 0.0,
        lambda u: 0.0,
        0.0,
        {"dim": dim, "amplitude": amplitude},
    )


def discounted(lam: float = 1.0, dim: int = 1, amplitude: float = 0.0) -> LagrangianModel:
    """``L = L0(x, v) - lam * u`` with ``L0 = |v|^2/2 - amplitude * cos(x_1)``."""
    if lam < 0:
        raise ValueError("discount factor must be nonnegative")
    return _kinetic_family(
        "discounted",
        dim,
        amplitude,
        lambda u: -lam * u,
        lambda u: -lam,
        lam,
        {"lam": lam, "dim": dim, "amplitude": amplitude},
    )


def bounded_contact(k: float = 0.5, dim: int = 1, amplitude: float = 0.0) -> LagrangianModel:
    """``L = L0(x, v) + k sin(u)``; ``|L_u| <= |k|`` everywhere."""
    return _kinetic_family(
        "bounded-contact",
        dim,
        amplitude,
        lambda u: k * np.sin(u),
        lambda u: k * np.cos(u),
        abs(k),
        {"k": k, "dim": dim, "amplitude": amplitude},
    )


@dataclass
class ModelEntry:
    factory: Callable[..., LagrangianModel]
    params: dict
    description: str
    conditions: str


DEFAULT_MODELS = {
    "quadratic-free": ModelEntry(quadratic_free, {"dim": 1}, "L = |v|^2/2", "L1 L2 L3 L2'"),
    "mechanical": ModelEntry(
        mechanical, {"dim": 1, "amplitude": 1.0}, "L = |v|^2/2 - amplitude*cos(x1)", "L1 L2 L3 L2'"
    ),
    "discounted": ModelEntry(
        discounted,
        {"lam": 1.0, "dim": 1, "amplitude": 0.0},
        "L = |v|^2/2 - amplitude*cos(x1) - lam*u",
        "L1 L2 L3(K=lam) L2'",
    ),
    "bounded-contact": ModelEntry(
        bounded_contact,
        {"k": 0.5, "dim": 1, "amplitude": 0.0},
        "L = |v|^2/2 - amplitude*cos(x1) + k*sin(u)",
        "L1 L2 L3(K=|k|) L2'",
    ),
}


class Registry:
    """Name -> model factory map.  ``Registry()`` holds the built-ins."""

    def __init__(self, entries: dict | None = None):
        self.entries = dict(DEFAULT_MODELS if entries is None else entries)

    def register(self, name, factory, params=None, description="", conditions="unchecked"):
        self.entries[name] = ModelEntry(factory, dict(params or {}), description, conditions)

    def names(self):
        return list(self.entries)

    def build(self, name: str, params: dict | None = None) -> LagrangianModel:
        if name not in self.entries:
            raise UnsupportedModel(f"unknown model {name!r}; known: {', '.join(self.entries)}")
        entry = self.entries[name]
        merged = dict(entry.params)
        for key, val in (params or {}).items():
            if key not in merged:
                raise UnsupportedModel(f"model {name!r} has no parameter {key!r}")
            merged[key] = val
        lag = entry.factory(**merged)
        lag.name = name
        lag.registry_key = (name, tuple(sorted(merged.items())))
        return lag

    def listing(self) -> str:
        lines = []
        for name, e in self.entries.items():
            ps = ", ".join(f"{k}={v!r}" for k, v in e.params.items())
            lines.append(f"{name}\n    {e.description}\n    params: {ps or '(none)'}\n    conditions: {e.conditions}")
        return "\n".join(lines)


def build_model(name: str, params: dict | None = None) -> LagrangianModel:
    return Registry().build(name, params)


def closed_form_hamiltonian(lag: LagrangianModel) -> HamiltonianModel:
    """Exact ``H`` for the built-in kinetic families.

    ``L = |v|^2/2 - V(x) + c(u)`` gives ``H = |p|^2/2 + V(x) - c(u)``.
    """
    params = dict(lag.params)
    amp = params.get("amplitude", 0.0)
    if lag.name == "quadratic-free":
        c, dc = (lambda u: 0.0 * u), (lambda u: 0.0 * u)
    elif lag.name == "mechanical":
        c, dc = (lambda u: 0.0 * u), (lambda u: 0.0 * u)
    elif lag.name == "discounted":
        lam = params["lam"]
        c, dc = (lambda u: -lam * u), (lambda u: -lam + 0.0 * u)
    elif lag.name == "bounded-contact":
        k = params["k"]
        c, dc = (lambda u: k * np.sin(u)), (lambda u: k * np.cos(u))
    else:
        raise UnsupportedModel(f"no closed-form Hamiltonian for {lag.name!r}")
    n = lag.dim

    def V(x):
        return amp * np.cos(np.asarray(x, float)[..., 0])

    def dV(x):
        g = np.zeros(np.shape(x))
        g[..., 0] = -amp * np.sin(np.asarray(x, float)[..., 0])
        return g

    def h(x, u, p):
        return 0.5 * _sq(np.asarray(p, float)) + V(x) - c(np.asarray(u, float))

    def hx(x, u, p):
        return dV(np.broadcast_to(x, np.broadcast_shapes(np.shape(x), np.shape(p))))

    def hu(x, u, p):
        return -dc(np.asarray(u, float))

    def hp(x, u, p):
        return np.array(p, dtype=float)

    def full(x, u, p):
        p = np.asarray(p, float)
        return float(h(x, u, p)), hx(x, u, p), float(hu(x, u, p)), p.copy()

    return HamiltonianModel(
        dim=n,
        eval=h,
        grad_x=hx,
        grad_p=hp,
        du=hu,
        hess_pp=lambda x, u, p: _eye(p, n),
        full=full,
        name=f"H*[{lag.name}]",
    )
