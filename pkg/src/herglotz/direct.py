"""Direct minimization of the implicit action over discrete paths.

The objective is ``J(xi) = u_xi(t) - u0`` computed by the fixed-substep RK4
solve of the Carathéodory equation.  Its gradient with respect to the interior
nodes is the discrete adjoint of that solve: each RK4 stage contributes
``w * (L_x . phi_k + L_v . phi_k')`` where ``w`` is the sensitivity of
``u(t)`` to the stage value, i.e. the discrete form of the kernel
``exp(int_s^t L_u)``.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded
from scipy.optimize import line_search

try:  # not re-exported publicly
    from scipy.optimize._linesearch import LineSearchWarning
except ImportError:  # pragma: no cover
    LineSearchWarning = RuntimeWarning

from . import caratheodory as cara
from .caratheodory import CaratheodoryTrace, DiscretePath
from .errors import LineSearchFailure, NonFinite
from .model import LagrangianModel

log = logging.getLogger(__name__)

# RK4 stage weights
_B = (1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0)


@dataclass
class MinimizeOptions:
    N: int = 64
    gtol: float | None = None  # default 1e-8 * (1 + |action|)
    max_iters: int = 500
    multistart: bool = False
    seed: int = 0
    memory: int = 10
    tol: float = 1e-10  # Carathéodory per-cell Richardson tolerance
    c1: float = 1e-4
    c2: float = 0.9

    def gtol_for(self, action):
        return self.gtol if self.gtol is not None else 1e-8 * (1.0 + abs(action))


@dataclass
class AdjointWeights:
    w: np.ndarray

    def check(self, K, t, slack=1e-12):
        lo, hi = math.exp(-K * t) - slack, math.exp(K * t) + slack
        return bool(abs(self.w[-1] - 1.0) <= slack and np.all((self.w >= lo) & (self.w <= hi)))


@dataclass
class MinimizeResult:
    path: DiscretePath
    trace: CaratheodoryTrace
    action: float
    grad_inf_norm: float
    erdmann_spread: float
    herglotz_residual: float
    iterations: int
    converged: bool
    u0: float = 0.0
    gtol: float = 0.0
    erdmann_tol: float = 0.0
    history: list = field(default_factory=list, repr=False)
    message: str = ""


@dataclass
class TestReport:
    passed: bool
    values: list
    reference: float
    worst_margin: float
    detail: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class


# ---------------------------------------------------------------------------
# action and gradient
# ---------------------------------------------------------------------------


def _backward(lag, path, rec, alpha=None):
    """Discrete adjoint of the recorded RK4 pass.

    Returns the gradient at all N+1 nodes and the node adjoint weights
    ``d u(t) / d u(s_k)``.
    """
    N, n, H = path.N, path.dim, path.h
    pts = path.points()
    dxs = np.diff(pts, axis=0)
    alpha = np.ones(N) if alpha is None else np.asarray(alpha, float)
    cell = rec.cell
    S = len(cell)
    a_c = alpha[cell]
    # stage points, shape (S, 4, n)
    xs = pts[cell][:, None, :] + rec.frac[..., None] * dxs[cell][:, None, :]
    veff = (dxs[cell] / H / a_c[:, None])[:, None, :].repeat(4, axis=1)
    flat_x = xs.reshape(-1, n)
    flat_v = veff.reshape(-1, n)
    flat_u = rec.u.reshape(-1)
    Lx = np.asarray(lag.grad_x(flat_x, flat_u, flat_v), float).reshape(S, 4, n)
    Lv = np.asarray(lag.grad_v(flat_x, flat_u, flat_v), float).reshape(S, 4, n)
    Lu = np.broadcast_to(np.asarray(lag.du(flat_x, flat_u, flat_v), float), flat_u.shape).reshape(S, 4)
    Fu = (a_c[:, None] * Lu).tolist()
    hs = (H / rec.substeps[cell]).tolist()

    coef = np.empty((S, 4))
    node_w = np.empty(N + 1)
    node_w[N] = 1.0
    ubar = 1.0
    for j in range(S - 1, -1, -1):
        h = hs[j]
        fu1, fu2, fu3, fu4 = Fu[j]
        kb1 = h * _B[0] * ubar
        kb2 = h * _B[1] * ubar
        kb3 = h * _B[2] * ubar
        c4 = h * _B[3] * ubar
        nxt = ubar + c4 * fu4
        kb3 += c4 * fu4 * h
        c3 = kb3
        nxt += c3 * fu3
        kb2 += c3 * fu3 * 0.5 * h
        c2 = kb2
        nxt += c2 * fu2
        kb1 += c2 * fu2 * 0.5 * h
        c1 = kb1
        nxt += c1 * fu1
        coef[j] = (c1, c2, c3, c4)
        ubar = nxt
        if j == 0 or cell[j - 1] != cell[j]:
            node_w[cell[j]] = ubar

    ax = a_c[:, None, None] * Lx
    dv = Lv / H
    d_left = ax * (1.0 - rec.frac[..., None]) - dv
    d_right = ax * rec.frac[..., None] + dv
    grad = np.zeros((N + 1, n))
    np.add.at(grad, cell, np.einsum("sk,skn->sn", coef, d_left))
    np.add.at(grad, cell + 1, np.einsum("sk,skn->sn", coef, d_right))
    return grad, node_w


def action_and_gradient(lag, path, u0, substeps, alpha=None):
    """Return ``(action, grad over interior nodes (N-1, n), trace, node weights)``."""
    trace, rec = cara.stage_record(lag, path, u0, substeps, alpha)
    grad, node_w = _backward(lag, path, rec, alpha)
    return trace.action, grad[1:-1], trace, node_w


def action_gradient(lag: LagrangianModel, path: DiscretePath, u0: float, substeps=None, tol=1e-10):
    """Action and its gradient with respect to the interior nodes.

    ``substeps`` fixes the RK4 substeps per cell; by default they come from an
    adaptive solve of the same path.
    """
    if substeps is None:
        substeps = cara.solve(lag, path, u0, tol=tol).substeps
    value, grad, _, _ = action_and_gradient(lag, path, u0, substeps)
    return value, grad


def adjoint_weights(lag: LagrangianModel, path: DiscretePath, trace: CaratheodoryTrace) -> AdjointWeights:
    """``w(s_k) = exp(int_{s_k}^t L_u dr)`` by trapezoidal accumulation over half cells."""
    Lu = _lu_profile(lag, path, trace)
    halves = 0.25 * path.h * (Lu[:-1] + Lu[1:])
    tail = np.concatenate([np.cumsum(halves[::-1])[::-1], [0.0]])
    return AdjointWeights(np.exp(tail[::2]))


def _lu_profile(lag, path, trace):
    """``L_u`` at s_0, m_0, s_1, m_1, ..., s_N using each cell's velocity.

    At interior nodes the left and right cell values are averaged.
    """
    pts = path.points()
    mids = path.midpoints()
    vs = path.velocities()
    left = np.broadcast_to(lag.du(pts[:-1], trace.u[:-1], vs), (path.N,))
    right = np.broadcast_to(lag.du(pts[1:], trace.u[1:], vs), (path.N,))
    mid = np.broadcast_to(lag.du(mids, trace.u_mid, vs), (path.N,))
    out = np.empty(2 * path.N + 1)
    out[1::2] = mid
    out[0] = left[0]
    out[-1] = right[-1]
    out[2:-1:2] = 0.5 * (right[:-1] + left[1:])
    return out


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def erdmann_profile(lag: LagrangianModel, path: DiscretePath, trace: CaratheodoryTrace) -> np.ndarray:
    """Per-cell ``exp(-int_0^s L_u) (L_v . xi' - L)`` at the cell midpoints."""
    Lu = _lu_profile(lag, path, trace)
    halves = 0.25 * path.h * (Lu[:-1] + Lu[1:])
    head = np.concatenate([[0.0], np.cumsum(halves)])[1::2]
    mids = path.midpoints()
    vs = path.velocities()
    L = np.asarray(lag.eval(mids, trace.u_mid, vs), float)
    Lv = np.asarray(lag.grad_v(mids, trace.u_mid, vs), float)
    return np.exp(-head) * (np.sum(Lv * vs, axis=-1) - L)


def herglotz_profile(lag, path, trace):
    """``d/ds L_v - L_x - L_u L_v`` at the interior nodes."""
    mids = path.midpoints()
    vs = path.velocities()
    Lx = np.asarray(lag.grad_x(mids, trace.u_mid, vs), float)
    Lv = np.asarray(lag.grad_v(mids, trace.u_mid, vs), float)
    Lu = np.broadcast_to(np.asarray(lag.du(mids, trace.u_mid, vs), float), (path.N,))
    rhs = Lx + Lu[:, None] * Lv
    return np.diff(Lv, axis=0) / path.h - 0.5 * (rhs[1:] + rhs[:-1])


def herglotz_residual(lag: LagrangianModel, path: DiscretePath, trace: CaratheodoryTrace) -> float:
    """Discrete L2 norm of the Herglotz-equation residual over interior nodes."""
    r = herglotz_profile(lag, path, trace)
    return float(math.sqrt(path.h * np.sum(r * r)))


def erdmann_tolerance(gtol, K, t, N):
    return 10.0 * gtol * math.exp(K * t) * N


# ---------------------------------------------------------------------------
# L-BFGS
# ---------------------------------------------------------------------------


class _Objective:
    """Memoized action/gradient on the flattened interior nodes."""

    def __init__(self, lag, base, u0, substeps):
        self.lag, self.base, self.u0, self.substeps = lag, base, u0, substeps
        self.cache_key = None
        self.evals = 0

    def _eval(self, z):
        key = z.tobytes()
        if key != self.cache_key:
            path = self.base.with_nodes(z.reshape(self.base.nodes.shape))
            try:
                val, grad, _, _ = action_and_gradient(self.lag, path, self.u0, self.substeps)
            except NonFinite:
                val, grad = math.inf, np.full(z.shape, np.nan)
            self.cache_key, self.cache = key, (val, grad.ravel())
            self.evals += 1
        return self.cache

    def f(self, z):
        return self._eval(z)[0]

    def g(self, z):
        return self._eval(z)[1]


class _Preconditioner:
    """Inverse of the discrete kinetic stiffness ``T / h`` (T = tridiag(-1, 2, -1)).

    The inverse applies per coordinate with a banded solve.
    """

    def __init__(self, N, n, h):
        m = N - 1
        self.n = n
        self.h = h
        self.ab = np.zeros((3, m))
        self.ab[0, 1:] = -1.0
        self.ab[1, :] = 2.0
        self.ab[2, :-1] = -1.0

    def __call__(self, r):
        r = r.reshape(-1, self.n)
        return (self.h * solve_banded((1, 1), self.ab, r)).ravel()


def _lbfgs(obj, z0, opts, precond, gtol_fn):
    """Preconditioned two-loop L-BFGS with a strong-Wolfe line search.

    Returns ``(z, f, g, iterations, converged, history, message)``.
    """
    z = z0.copy()
    f = obj.f(z)
    g = obj.g(z)
    if not math.isfinite(f):
        raise NonFinite("action is not finite at the initial path")
    S, Y = [], []
    gamma = 1.0
    history = [f]
    old_f = None
    for it in range(opts.max_iters):
        if np.max(np.abs(g), initial=0.0) <= gtol_fn(f):
            return z, f, g, it, True, history, "gradient tolerance reached"
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(S), reversed(Y)):
            rho = 1.0 / (y @ s)
            a = rho * (s @ q)
            alphas.append((a, rho, s, y))
            q -= a * y
        r = gamma * precond(q)
        for a, rho, s, y in reversed(alphas):
            b = rho * (y @ r)
            r += (a - b) * s
        d = -r
        if not g @ d < 0:
            S.clear(), Y.clear()
            d = -precond(g)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LineSearchWarning)
            step, _, _, f_new, _, g_new = line_search(
                obj.f, obj.g, z, d, gfk=g, old_fval=f, old_old_fval=old_f, c1=opts.c1, c2=opts.c2, maxiter=30
            )
        if step is None:
            step, f_new, g_new = _derivative_search(obj, z, d, f, g, opts.c2)
        if step is None:
            return z, f, g, it, False, history, "line search stalled"
        s = step * d
        z_new = z + s
        g_new = obj.g(z_new)
        y = g_new - g
        sy = s @ y
        if sy > 1e-300:
            S.append(s)
            Y.append(y)
            if len(S) > opts.memory:
                S.pop(0), Y.pop(0)
            gamma = sy / (y @ precond(y))
        old_f, f, g, z = f, f_new, g_new, z_new
        history.append(f)
    conv = np.max(np.abs(g), initial=0.0) <= gtol_fn(f)
    return z, f, g, opts.max_iters, conv, history, "iteration limit"


def _derivative_search(obj, z, d, f, g, c2, max_evals=40):
    """Bracket a zero of the directional derivative using gradients only.

    Used when function values have reached roundoff and the Wolfe search can no
    longer see a decrease.  A step is accepted when the curvature condition
    holds and the action has not increased beyond roundoff.
    """
    slack = 64 * np.finfo(float).eps * (1.0 + abs(f))
    d0 = g @ d
    lo, hi = (0.0, d0), None
    a = 1.0
    for _ in range(max_evals):
        zn = z + a * d
        gn = obj.g(zn)
        fn = obj.f(zn)
        da = gn @ d
        if not math.isfinite(fn) or fn > f + slack:
            hi = (a, abs(d0))
        elif abs(da) <= c2 * abs(d0):
            return a, fn, gn
        elif da < 0:
            lo = (a, da)
        else:
            hi = (a, da)
        if hi is None:
            a *= 2.0
        else:
            (al, dl), (ah, dh) = lo, hi
            a = al + (ah - al) * (-dl) / (dh - dl) if dh > dl else 0.5 * (al + ah)
            a = min(max(a, al + 0.1 * (ah - al)), ah - 0.1 * (ah - al))
    return None, None, None


def _perturbed_starts(path, count, seed):
    rng = np.random.default_rng(seed)
    N, n = path.N, path.dim
    s = np.arange(1, N)[:, None] / N
    scale = 0.25 * (np.linalg.norm(path.x1 - path.x0) + path.t_final)
    starts = []
    for _ in range(count):
        bump = np.zeros((N - 1, n))
        for mode in range(1, 4):
            bump += rng.normal(size=n)[None, :] * np.sin(mode * math.pi * s) / mode
        starts.append(path.nodes + scale * bump)
    return starts


def _run(lag, x0, x1, t, u0, opts, init_nodes):
    base = DiscretePath(t, x0, x1, init_nodes)
    precond = _Preconditioner(base.N, base.dim, base.h)
    substeps = cara.solve(lag, base, u0, tol=opts.tol).substeps
    z = base.nodes.ravel().copy()
    total_iters = 0
    history = []
    for _ in range(4):
        obj = _Objective(lag, base, u0, substeps)
        z, f, g, iters, conv, hist, msg = _lbfgs(obj, z, opts, precond, opts.gtol_for)
        total_iters += iters
        history.extend(hist)
        path = base.with_nodes(z.reshape(base.nodes.shape))
        check = cara.solve(lag, path, u0, tol=opts.tol)
        # re-optimize when the substep counts chosen at the start are no longer accurate enough
        if np.all(check.substeps <= substeps):
            break
        substeps = np.maximum(substeps, check.substeps)
    return path, substeps, f, g, total_iters, conv, history, msg


def minimize(
    lag: LagrangianModel, x0, x1, t: float, u0: float, opts: MinimizeOptions | None = None, init_nodes=None
) -> MinimizeResult:
    """Minimize ``u_xi(t)`` over piecewise-linear paths from ``x0`` to ``x1``.

    Starts from the straight line, or from ``init_nodes`` when given (plus
    five perturbed starts when ``opts.multistart``), and returns the lowest-action result with Erdmann and
    Herglotz diagnostics.  Raises :class:`LineSearchFailure` carrying the best
    iterate if the line search stalls before convergence.
    """
    opts = opts or MinimizeOptions()
    if not t > 0:
        raise ValueError("t must be positive")
    if opts.N < 8:
        raise ValueError("N must be at least 8")
    straight = DiscretePath.straight(x0, x1, t, opts.N)
    if init_nodes is not None:
        straight = straight.with_nodes(init_nodes)
    starts = [straight.nodes]
    if opts.multistart:
        starts += _perturbed_starts(straight, 5, opts.seed)

    best = None
    for init in starts:
        path, substeps, f, g, iters, conv, history, msg = _run(lag, straight.x0, straight.x1, t, u0, opts, init)
        cand = (f, path.length(), path, substeps, g, iters, conv, history, msg)
        if best is None or f < best[0] - 1e-9 or (abs(f - best[0]) <= 1e-9 and cand[1] < best[1]):
            best = cand
    f, _, path, substeps, g, iters, conv, history, msg = best
    result = finalize(lag, path, u0, opts, g=g.reshape(path.nodes.shape), iterations=iters, converged=conv)
    result.history = history
    result.message = msg
    if not conv and msg == "line search stalled":
        raise LineSearchFailure(f"line search stalled after {iters} iterations", best=result)
    return result


def finalize(lag, path, u0, opts, g=None, iterations=0, converged=None) -> MinimizeResult:
    """Package a path as a :class:`MinimizeResult` with all diagnostics."""
    trace = cara.solve(lag, path, u0, tol=opts.tol)
    if g is None:
        _, g = action_gradient(lag, path, u0, substeps=trace.substeps)
    gnorm = float(np.max(np.abs(g), initial=0.0))
    gtol = opts.gtol_for(trace.action)
    if converged is None:
        converged = gnorm <= gtol
    E = erdmann_profile(lag, path, trace)
    return MinimizeResult(
        path=path,
        trace=trace,
        action=trace.action,
        grad_inf_norm=gnorm,
        erdmann_spread=float(E.max() - E.min()),
        herglotz_residual=herglotz_residual(lag, path, trace),
        iterations=iterations,
        converged=bool(converged),
        u0=float(u0),
        gtol=gtol,
        erdmann_tol=erdmann_tolerance(gtol, lag.K, path.t_final, path.N),
    )


# ---------------------------------------------------------------------------
# reparametrization
# ---------------------------------------------------------------------------


def random_reparametrization(N, rng):
    """Piecewise-constant ``alpha`` in [1/2, 3/2] with cell mean exactly 1."""
    beta = rng.uniform(-1.0, 1.0, N)
    beta -= beta.mean()
    peak = np.max(np.abs(beta))
    if peak > 0:
        beta *= rng.uniform(0.05, 0.5) / peak
    return 1.0 + beta


def reparametrized_action(lag, path, u0, alpha, tol=1e-10):
    """Action of ``xi`` traversed with speed profile ``1/alpha`` (same endpoints and horizon)."""
    return cara.solve(lag, path, u0, tol=tol, alpha=alpha).action


def reparametrization_test(lag: LagrangianModel, result: MinimizeResult, alpha_seed: int = 0, draws: int = 20) -> TestReport:
    """Check that no random time change of the minimizer lowers its action."""
    rng = np.random.default_rng(alpha_seed)
    ref = result.action
    slack = 1e-7 * (1.0 + abs(ref))
    values = []
    for _ in range(draws):
        alpha = random_reparametrization(result.path.N, rng)
        values.append(reparametrized_action(lag, result.path, result.u0, alpha))
    margins = np.asarray(values) - ref
    worst = float(margins.min())
    return TestReport(bool(worst >= -slack), values, ref, worst)


# ---------------------------------------------------------------------------
# lattice-restricted minimization
# ---------------------------------------------------------------------------


def lattice_minimize(lag, x0, x1, t, u0, velocity_grid, n_steps, tol=1e-15, max_sweeps=200):
    """Minimize the action over paths whose cell velocities lie on ``velocity_grid``.

    Velocity grids are product lattices of uniformly spaced values.  The search
    is a steepest-descent exchange: move ``delta`` from one cell's velocity to
    another's (endpoint preserved) while that lowers the action.  Every lattice
    endpoint within half a cell of ``x1`` is tried.  Returns ``(action, path)``.
    """
    x0 = np.atleast_1d(np.asarray(x0, float))
    x1 = np.atleast_1d(np.asarray(x1, float))
    n = x0.size
    grid = np.asarray(velocity_grid, float).reshape(-1, n)
    values = [np.unique(grid[:, i]) for i in range(n)]
    dv = np.array([np.min(np.diff(v)) if len(v) > 1 else 0.0 for v in values])
    vmin = np.array([v[0] for v in values])
    vmax = np.array([v[-1] for v in values])
    dt = t / n_steps

    def action(vel):
        path = DiscretePath.from_points(t, x0 + np.vstack([np.zeros((1, n)), np.cumsum(vel * dt, axis=0)]))
        return cara.solve(lag, path, u0, tol=tol).action, path

    # integer coordinates: velocity = vmin + k * dv
    total = np.where(dv > 0, (x1 - x0) / np.where(dv > 0, dv, 1.0) / dt - n_steps * vmin / np.where(dv > 0, dv, 1.0), 0.0)
    kmax = np.where(dv > 0, np.rint((vmax - vmin) / np.where(dv > 0, dv, 1.0)), 0).astype(int)
    targets = []
    for i in range(n):
        cands = {int(np.floor(total[i] + 1e-9)), int(np.ceil(total[i] - 1e-9))} if dv[i] > 0 else {0}
        targets.append(sorted(c for c in cands if abs(c - total[i]) <= 0.5 + 1e-9 and 0 <= c <= n_steps * kmax[i]))
    best = None
    for target in itertools.product(*targets):
        target = np.array(target)
        # balanced start
        k = np.tile(target // n_steps, (n_steps, 1))
        for i in range(n):
            k[: target[i] % n_steps, i] += 1
        vel = vmin + k * dv
        val, path = action(vel)
        for _ in range(max_sweeps):
            improved = None
            for a, b in itertools.permutations(range(n_steps), 2):
                for i in range(n):
                    for step in (1, 2):
                        kk = k.copy()
                        kk[a, i] += step
                        kk[b, i] -= step
                        if kk[a, i] > kmax[i] or kk[b, i] < 0:
                            continue
                        cand_val, cand_path = action(vmin + kk * dv)
                        if cand_val < (improved[0] if improved else val):
                            improved = (cand_val, cand_path, kk)
            if improved is None:
                break
            val, path, k = improved
        if best is None or val < best[0]:
            best = (val, path)
    if best is None:
        raise ValueError("no lattice endpoint lies within half a cell of x1")
    return best
