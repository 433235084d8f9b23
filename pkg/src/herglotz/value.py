"""Fundamental-solution tables ``h_{x0,u0}(t, x)`` built by per-cell minimization.

Also checks the dynamic-programming identities against a minimizer and the
Hamilton-Jacobi residual ``D_t h + H(x, h, D_x h)`` of a finished table.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .direct import MinimizeOptions, MinimizeResult, TestReport, minimize
from .errors import HerglotzError
from .model import HamiltonianModel, LagrangianModel, build_model

OK = "ok"
NOT_CONVERGED = "not-converged"
FAILED = "failed"
FORMAT = "herglotz-value-table"


@dataclass
class ValueTable:
    """Values ``h[i, j...]`` at ``(t_grid[i], x_axes[0][j0], ...)``.

    ``status`` has the same shape as ``h``; failed cells hold ``nan``.
    """

    x0: np.ndarray
    u0: float
    t_grid: np.ndarray
    x_axes: list
    h: np.ndarray
    status: np.ndarray
    model: str = "custom"
    model_params: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    version: str = __version__
    lag: LagrangianModel | None = field(default=None, repr=False, compare=False)

    @property
    def dim(self):
        return len(self.x_axes)

    @property
    def shape(self):
        return self.h.shape

    def points(self):
        """Lattice points with shape ``x_shape + (dim,)``."""
        mesh = np.meshgrid(*self.x_axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def converged(self):
        return self.status == OK

    def value(self, t, x):
        """Stored value at grid time ``t`` and lattice point ``x`` (exact lookup)."""
        i = _index(self.t_grid, t)
        idx = tuple(_index(ax, xi) for ax, xi in zip(self.x_axes, np.atleast_1d(x)))
        return float(self.h[(i,) + idx])

    def minimize_options(self):
        return MinimizeOptions(**self.options)


def _index(axis, value):
    j = int(np.argmin(np.abs(np.asarray(axis) - value)))
    if abs(axis[j] - value) > 1e-12 * (1.0 + abs(value)):
        raise KeyError(f"{value} is not on the grid")
    return j


def _as_axes(x_grid, dim):
    if len(x_grid) == 0:
        raise ValueError("x_grid must be nonempty")
    if dim == 1 and np.ndim(x_grid) == 1 and not isinstance(x_grid[0], (list, tuple, np.ndarray)):
        return [np.asarray(x_grid, dtype=float)]
    axes = [np.asarray(a, dtype=float) for a in x_grid]
    if len(axes) != dim:
        raise ValueError(f"x_grid needs {dim} axes, got {len(axes)}")
    return axes


# ---------------------------------------------------------------------------
# building
# ---------------------------------------------------------------------------


def _solve_cell(lag, x0, x, t, u0, opts, init=None):
    try:
        res = minimize(lag, x0, x, t, u0, opts, init_nodes=init)
    except HerglotzError as exc:
        best = getattr(exc, "best", None)
        if best is not None:
            return u0 + best.action, NOT_CONVERGED, best.path
        return math.nan, FAILED, None
    return u0 + res.action, OK if res.converged else NOT_CONVERGED, res.path


def _column(lag, x0, x, t_grid, u0, opts, warm_start):
    """All times for one lattice point; warm starts reuse the previous minimizer."""
    values, flags = [], []
    prev = None
    for t in t_grid:
        init = None
        if warm_start and prev is not None:
            # the previous minimizer on the same node grid, i.e. rescaled to the new horizon
            init = prev.nodes
        h, flag, path = _solve_cell(lag, x0, x, t, u0, opts, init)
        values.append(h)
        flags.append(flag)
        prev = path if flag == OK else None
    return values, flags


def _column_job(args):
    name, params, x0, x, t_grid, u0, opts, warm_start = args
    return _column(build_model(name, params), x0, x, t_grid, u0, opts, warm_start)


def build_table(
    lag: LagrangianModel,
    x0,
    u0: float,
    t_grid,
    x_grid,
    opts: MinimizeOptions | None = None,
    jobs: int = 1,
    warm_start: bool = False,
) -> ValueTable:
    """Minimize from ``(x0, u0)`` to every ``(t, x)`` cell.

    ``x_grid`` is one axis (1-D models) or a list of ``dim`` axes forming a
    rectangular lattice.  Cells that fail or do not converge are recorded in
    ``status``, never silently filled.  ``jobs > 1`` farms lattice columns to
    worker processes; this needs a registry model so workers can rebuild it.
    """
    opts = opts or MinimizeOptions()
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.size == 0 or not np.all(t_grid > 0):
        raise ValueError("t_grid must be nonempty and positive")
    if not np.all(np.diff(t_grid) > 0):
        raise ValueError("t_grid must be increasing")
    axes = _as_axes(x_grid, lag.dim)
    if any(a.size == 0 for a in axes):
        raise ValueError("x_grid axes must be nonempty")
    x_shape = tuple(a.size for a in axes)
    cells = list(itertools.product(*[range(n) for n in x_shape]))
    targets = [np.array([axes[d][j[d]] for d in range(lag.dim)]) for j in cells]

    h = np.full((t_grid.size,) + x_shape, math.nan)
    status = np.full(h.shape, FAILED, dtype=object)
    key = lag.registry_key
    if jobs > 1 and key is not None and len(cells) > 1:
        name, params = key
        work = [(name, dict(params), x0, x, t_grid, float(u0), opts, warm_start) for x in targets]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            columns = list(pool.map(_column_job, work, chunksize=max(1, len(work) // (4 * jobs))))
    else:
        columns = [_column(lag, x0, x, t_grid, float(u0), opts, warm_start) for x in targets]
    # single writer
    for j, (vals, flags) in zip(cells, columns):
        h[(slice(None),) + j] = vals
        status[(slice(None),) + j] = flags

    name, params = key if key is not None else (lag.name, dict(lag.params))
    return ValueTable(
        x0=x0,
        u0=float(u0),
        t_grid=t_grid,
        x_axes=axes,
        h=h,
        status=status.astype(str),
        model=name,
        model_params=dict(params),
        options=asdict(opts),
        lag=lag,
    )


def rebuild_cell(table: ValueTable, i: int, j) -> float:
    """Recompute one cell from scratch (independence check)."""
    j = tuple(np.atleast_1d(j))
    x = np.array([table.x_axes[d][j[d]] for d in range(table.dim)])
    lag = table.lag or build_model(table.model, table.model_params)
    h, _, _ = _solve_cell(lag, table.x0, x, float(table.t_grid[i]), table.u0, table.minimize_options())
    return h


# ---------------------------------------------------------------------------
# identities
# ---------------------------------------------------------------------------


def split_nodes(N: int, count: int = 5, min_cells: int = 8):
    """``count`` interior node indices, evenly spread, leaving ``min_cells`` on each side."""
    if N < 2 * min_cells + count - 1:
        raise ValueError(f"N={N} is too small for {count} split times")
    raw = np.linspace(min_cells, N - min_cells, count)
    return [int(round(k)) for k in raw]


def check_equivalence(table: ValueTable, result: MinimizeResult, count: int = 5) -> TestReport:
    """Check ``h(s, xi(s)) = u_xi(s)`` and the concatenation identity along ``result``.

    For each split node ``k`` (time ``s = k t / N``) the prefix problem
    ``x0 -> xi(s)`` is re-minimized on ``k`` cells and compared with the
    trace value ``u_xi(s)``; the suffix problem ``xi(s) -> x1`` started from
    ``u_xi(s)`` is re-minimized on ``N - k`` cells and compared with
    ``u_xi(t)``.  Tolerance ``1e-5 (1 + |u|)`` in both cases.
    """
    lag = table.lag or build_model(table.model, table.model_params)
    path, trace = result.path, result.trace
    if not np.allclose(path.x0, table.x0, atol=1e-12) or abs(result.u0 - table.u0) > 1e-12:
        raise ValueError("result does not start from the table's (x0, u0)")
    base = table.minimize_options()
    pts = path.points()
    N, t = path.N, path.t_final
    u_end = trace.u[-1]

    rows = []
    worst = math.inf
    for k in split_nodes(N, count):
        s = k * path.h
        u_s = float(trace.u[k])
        pre = minimize(lag, path.x0, pts[k], s, table.u0, _with_n(base, k))
        post = minimize(lag, pts[k], path.x1, t - s, u_s, _with_n(base, N - k))
        h_s = table.u0 + pre.action
        cat = u_s + post.action
        tol_pre = 1e-5 * (1.0 + abs(u_s))
        tol_cat = 1e-5 * (1.0 + abs(u_end))
        margin = min(tol_pre - abs(h_s - u_s), tol_cat - abs(cat - u_end))
        worst = min(worst, margin)
        rows.append(
            {
                "node": k,
                "s": s,
                "u_xi": u_s,
                "h": h_s,
                "prefix_delta": h_s - u_s,
                "concat": cat,
                "concat_delta": cat - u_end,
                "converged": bool(pre.converged and post.converged),
            }
        )
    passed = worst >= 0 and all(r["converged"] for r in rows)
    return TestReport(bool(passed), [r["h"] for r in rows], float(u_end), float(worst), {"splits": rows})


def _with_n(opts, n):
    d = asdict(opts)
    d["N"] = max(int(n), 8)
    return MinimizeOptions(**d)


def continuity_anchor(table: ValueTable):
    """``|h(t_min, x0) - u0|`` against the loose bound ``10 t_min max|L(x0, u, 0)|``.

    Returns ``(passed, gap, bound)``; needs ``x0`` on the lattice.
    """
    lag = table.lag or build_model(table.model, table.model_params)
    idx = tuple(_index(ax, xi) for ax, xi in zip(table.x_axes, table.x0))
    t_min = float(table.t_grid[0])
    gap = abs(float(table.h[(0,) + idx]) - table.u0)
    us = table.u0 + np.linspace(-1.0, 1.0, 9)
    L = np.abs(lag.eval(np.broadcast_to(table.x0, (9, table.dim)), us, np.zeros((9, table.dim))))
    bound = 10.0 * t_min * float(np.max(L))
    return bool(gap <= bound + 1e-12), gap, bound


def monotone_in_u0(lag, x0, cells, u0_low, u0_high, opts=None):
    """Max of ``h_{u0_low} - h_{u0_high}`` over ``cells = [(t, x), ...]``; nonpositive when monotone."""
    if u0_low > u0_high:
        raise ValueError("u0_low must not exceed u0_high")
    worst = -math.inf
    for t, x in cells:
        a = u0_low + minimize(lag, x0, x, t, u0_low, opts).action
        b = u0_high + minimize(lag, x0, x, t, u0_high, opts).action
        worst = max(worst, a - b)
    return worst


# ---------------------------------------------------------------------------
# Hamilton-Jacobi residual
# ---------------------------------------------------------------------------


def _one_sided(h, grid, axis):
    """Forward, backward and central differences at interior points along ``axis``."""
    hm = np.moveaxis(h, axis, 0)
    d = np.diff(grid)
    shape = (-1,) + (1,) * (hm.ndim - 1)
    fwd = (hm[2:] - hm[1:-1]) / d[1:].reshape(shape)
    bwd = (hm[1:-1] - hm[:-2]) / d[:-1].reshape(shape)
    # second-order central difference on a possibly nonuniform grid
    a, b = d[:-1].reshape(shape), d[1:].reshape(shape)
    cen = (a * fwd + b * bwd) / (a + b)
    return [np.moveaxis(z, 0, axis) for z in (fwd, bwd, cen)]


def _interior(arr, ndim):
    return arr[(slice(1, -1),) * ndim]


def _trim(arr, axis, ndim):
    # restrict a difference array (interior along `axis`) to the full interior
    idx = [slice(1, -1)] * ndim
    idx[axis] = slice(None)
    return arr[tuple(idx)]


def hj_residual(table: ValueTable, ham: HamiltonianModel, jump_factor: float = 10.0) -> np.ma.MaskedArray:
    """``r = D_t h + H(x, h, D_x h)`` at interior cells by central differences.

    Returns a masked array over the interior ``(t, x...)`` cells.  Cells are
    masked when any neighbour failed, or when the one-sided differences along
    some axis disagree by more than ``jump_factor`` times the smaller
    disagreement at the two axis neighbours (a kink, where ``h`` is only
    continuous).  Jumps below ``1e-3`` of the largest slope on the axis are
    never kinks.  The
    mask is the non-smooth report; ``hj_summary`` condenses it.
    """
    h = table.h
    nd = h.ndim
    if any(n < 3 for n in h.shape):
        raise ValueError("central differences need at least 3 points per axis")
    grids = [table.t_grid] + list(table.x_axes)
    bad = ~np.isfinite(h) | (table.status != OK)
    # a cell is unusable if it or any axis neighbour is bad
    unusable = _interior(bad, nd).copy()
    for ax in range(nd):
        m = np.moveaxis(bad, ax, 0)
        near = np.moveaxis(m[2:] | m[:-2], 0, ax)
        unusable |= _trim(near, ax, nd)

    derivs = []
    kink = np.zeros_like(unusable)
    for ax in range(nd):
        fwd, bwd, cen = (_trim(z, ax, nd) for z in _one_sided(h, grids[ax], ax))
        jump = np.where(unusable, np.nan, np.abs(fwd - bwd))
        # smallest jump among the axis neighbours; smooth data varies slowly
        m = np.moveaxis(jump, ax, 0)
        pad = np.full((1,) + m.shape[1:], np.nan)
        nb = np.fmin(np.concatenate([pad, m[:-1]]), np.concatenate([m[1:], pad]))
        nb = np.moveaxis(np.where(np.isnan(nb), np.inf, nb), 0, ax)
        finite = np.abs(cen[~unusable])
        scale = float(np.max(finite)) if finite.size else 0.0
        kink |= np.nan_to_num(jump) > jump_factor * nb + 1e-3 * scale + 1e-12
        derivs.append(cen)

    ht = derivs[0]
    p = np.stack(derivs[1:], axis=-1)
    xs = _interior(np.broadcast_to(table.points()[None], h.shape + (table.dim,)), nd)
    u = _interior(h, nd)
    mask = unusable | kink
    safe_p = np.where(mask[..., None], 0.0, p)
    safe_u = np.where(mask, 0.0, u)
    H = np.asarray(ham.eval(xs, safe_u, safe_p), dtype=float).reshape(u.shape)
    r = ht + H
    return np.ma.masked_array(np.where(mask, 0.0, r), mask=mask)


def hj_summary(res: np.ma.MaskedArray, table: ValueTable | None = None) -> dict:
    """Max and grid-L2 of the smooth-cell residual plus the excluded-cell count."""
    vals = res.compressed()
    out = {
        "max_abs": float(np.max(np.abs(vals))) if vals.size else math.nan,
        "rms": float(np.sqrt(np.mean(vals**2))) if vals.size else math.nan,
        "smooth_cells": int(vals.size),
        "excluded_cells": int(np.ma.count_masked(res)),
    }
    if table is not None:
        out["excluded"] = [list(map(int, ij)) for ij in np.argwhere(np.ma.getmaskarray(res))]
    return out


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _paths(prefix):
    prefix = os.fspath(prefix)
    base = prefix[:-5] if prefix.endswith(".json") else prefix
    return base + ".json", base + ".csv"


def save_table(table: ValueTable, prefix) -> tuple[str, str]:
    """Write ``<prefix>.json`` (header) and ``<prefix>.csv`` (``t, x..., h, status``).

    Floats are written with ``repr`` so loading reproduces them bit for bit.
    """
    head_path, body_path = _paths(prefix)
    header = {
        "format": FORMAT,
        "version": table.version,
        "model": {"name": table.model, "params": table.model_params},
        "options": table.options,
        "x0": [repr(float(v)) for v in table.x0],
        "u0": repr(float(table.u0)),
        "t_grid": [repr(float(v)) for v in table.t_grid],
        "x_grid": [[repr(float(v)) for v in ax] for ax in table.x_axes],
        "body": os.path.basename(body_path),
        "columns": ["t"] + [f"x{d}" for d in range(table.dim)] + ["h", "status"],
    }
    with open(head_path, "w", encoding="utf-8") as fp:
        json.dump(header, fp, indent=2, sort_keys=True)
        fp.write("\n")
    with open(body_path, "w", newline="", encoding="utf-8") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(header["columns"])
        for idx in np.ndindex(table.h.shape):
            t = table.t_grid[idx[0]]
            xs = [table.x_axes[d][idx[1 + d]] for d in range(table.dim)]
            w.writerow([repr(float(t))] + [repr(float(v)) for v in xs] + [repr(float(table.h[idx])), table.status[idx]])
    return head_path, body_path


def load_table(prefix) -> ValueTable:
    head_path, _ = _paths(prefix)
    with open(head_path, encoding="utf-8") as fp:
        header = json.load(fp)
    if header.get("format") != FORMAT:
        raise ValueError(f"{head_path} is not a value table header")
    t_grid = np.array([float(v) for v in header["t_grid"]])
    axes = [np.array([float(v) for v in ax]) for ax in header["x_grid"]]
    shape = (t_grid.size,) + tuple(a.size for a in axes)
    h = np.empty(shape)
    status = np.empty(shape, dtype=object)
    body = os.path.join(os.path.dirname(head_path), header["body"])
    with open(body, newline="", encoding="utf-8") as fp:
        rows = csv.reader(fp)
        next(rows)
        for idx, row in zip(np.ndindex(shape), rows):
            h[idx] = float(row[-2])
            status[idx] = row[-1]
    return ValueTable(
        x0=np.array([float(v) for v in header["x0"]]),
        u0=float(header["u0"]),
        t_grid=t_grid,
        x_axes=axes,
        h=h,
        status=status.astype(str),
        model=header["model"]["name"],
        model_params=header["model"]["params"],
        options=header["options"],
        version=header["version"],
    )
