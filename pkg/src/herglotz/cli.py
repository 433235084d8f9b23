"""Config-driven experiment runner.

Usage::

    herglotz run --config experiment.toml [--output DIR] [--jobs N] [--seed K]
    herglotz models [--config experiment.toml] [--check]

The config is TOML.  Top level holds ``task``; tables ``[model]``,
``[geometry]``, ``[numerics]``, ``[output]`` and an optional array
``[[register]]`` of custom models.  See ``SCHEMA`` for every accepted key.
Exit status: 0 when every invariant in scope passes, 1 on a numeric failure
or a failed invariant (the manifest is still written), 2 on a config error.
"""

from __future__ import annotations

import argparse
import csv
import importlib
import io
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import tomli

from . import __version__
from . import caratheodory as cara
from . import characteristics as chars
from . import direct, oracle, value
from .errors import ConfigError, HerglotzError
from .model import (
    Box,
    Registry,
    check_conditions,
    closed_form_hamiltonian,
    make_hamiltonian,
)

TASKS = ("minimize", "shoot", "table", "invariants", "compare")
FORMATS = ("csv", "json", "plotdata")

# key -> (types, required-for-tasks or None)
SCHEMA = {
    "task": {"task": (str,)},
    "model": {"name": (str,), "params": (dict,)},
    "geometry": {
        "x0": (float, int, list),
        "x1": (float, int, list),
        "t": (float, int),
        "u0": (float, int),
        "t_grid": (list, dict),
        "x_grid": (list, dict),
    },
    "numerics": {
        "N": (int,),
        "gtol": (float,),
        "steps": (int,),
        "multistart": (bool,),
        "seed": (int,),
        "max_iters": (int,),
        "solve_tol": (float,),
        "compare_tol": (float,),
        "warm_start": (bool,),
        "hamiltonian": (str,),
    },
    "output": {"directory": (str,), "formats": (list,)},
    "register": {"name": (str,), "base": (str,), "factory": (str,), "params": (dict,), "description": (str,)},
}

REQUIRED = {
    "minimize": ("x0", "x1", "t", "u0"),
    "shoot": ("x0", "x1", "t", "u0"),
    "compare": ("x0", "x1", "t", "u0"),
    "invariants": ("x0", "x1", "t", "u0"),
    "table": ("x0", "u0", "t_grid", "x_grid"),
}

NUMERIC_DEFAULTS = {
    "N": 256,
    "gtol": None,
    "steps": 256,
    "multistart": False,
    "seed": 0,
    "max_iters": 500,
    "solve_tol": 1e-10,
    "compare_tol": 1e-5,
    "warm_start": False,
    "hamiltonian": "legendre",
}


@dataclass
class ExperimentConfig:
    task: str
    model: str
    params: dict
    geometry: dict
    numerics: dict
    directory: str
    formats: list
    registry: Registry = field(repr=False, default_factory=Registry)

    def echo(self):
        """Everything that affects numbers; the output directory is left out."""
        geo = {k: _jsonable(v) for k, v in sorted(self.geometry.items())}
        return {
            "task": self.task,
            "model": {"name": self.model, "params": dict(sorted(self.params.items()))},
            "geometry": geo,
            "numerics": dict(sorted(self.numerics.items())),
            "formats": list(self.formats),
        }

    def options(self):
        n = self.numerics
        return direct.MinimizeOptions(
            N=n["N"],
            gtol=n["gtol"],
            max_iters=n["max_iters"],
            multistart=n["multistart"],
            seed=n["seed"],
            tol=n["solve_tol"],
        )


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def _check_type(where, val, types):
    if isinstance(val, bool) and bool not in types:
        raise ConfigError(f"{where}: expected {'/'.join(t.__name__ for t in types)}, got bool")
    if not isinstance(val, types):
        raise ConfigError(f"{where}: expected {'/'.join(t.__name__ for t in types)}, got {type(val).__name__}")


def _grid(where, spec):
    if isinstance(spec, dict):
        extra = set(spec) - {"start", "stop", "num"}
        if extra:
            raise ConfigError(f"unknown key {where}.{sorted(extra)[0]}")
        for k in ("start", "stop", "num"):
            if k not in spec:
                raise ConfigError(f"missing required key {where}.{k}")
        return np.linspace(float(spec["start"]), float(spec["stop"]), int(spec["num"]))
    return np.asarray(spec, dtype=float)


def _x_grid(spec, dim):
    if isinstance(spec, list) and spec and isinstance(spec[0], (list, dict)):
        axes = [_grid(f"geometry.x_grid[{i}]", a) for i, a in enumerate(spec)]
    else:
        axes = [_grid("geometry.x_grid", spec)]
    if len(axes) != dim:
        raise ConfigError(f"geometry.x_grid: model has dim {dim} but {len(axes)} axes were given")
    return axes


def _register(registry, i, entry):
    where = f"register[{i}]"
    for key, val in entry.items():
        if key not in SCHEMA["register"]:
            raise ConfigError(f"unknown key {where}.{key}")
        _check_type(f"{where}.{key}", val, SCHEMA["register"][key])
    if "name" not in entry:
        raise ConfigError(f"missing required key {where}.name")
    if ("base" in entry) == ("factory" in entry):
        raise ConfigError(f"{where}: give exactly one of 'base' or 'factory'")
    params = dict(entry.get("params", {}))
    if "base" in entry:
        if entry["base"] not in registry.entries:
            raise ConfigError(f"{where}.base: unknown model {entry['base']!r}")
        base = registry.entries[entry["base"]]
        unknown = set(params) - set(base.params)
        if unknown:
            raise ConfigError(f"{where}.params: {entry['base']!r} has no parameter {sorted(unknown)[0]!r}")
        factory = base.factory
        merged = {**base.params, **params}
        conditions = base.conditions
        desc = entry.get("description", f"{entry['base']} with {params}")
    else:
        mod, _, attr = entry["factory"].partition(":")
        try:
            factory = getattr(importlib.import_module(mod), attr)
        except (ImportError, AttributeError) as exc:
            raise ConfigError(f"{where}.factory: cannot import {entry['factory']!r}: {exc}") from exc
        merged = params
        conditions = "unchecked"
        desc = entry.get("description", entry["factory"])
    registry.register(entry["name"], factory, merged, desc, conditions)


def parse_config(text: str, overrides: dict | None = None) -> ExperimentConfig:
    """Parse and validate a TOML experiment description."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}") from exc
    for key in raw:
        if key not in SCHEMA and key != "task":
            raise ConfigError(f"unknown key {key}")
    if "task" not in raw:
        raise ConfigError("missing required key task")
    task = raw["task"]
    _check_type("task", task, (str,))
    if task not in TASKS:
        raise ConfigError(f"task: {task!r} is not one of {', '.join(TASKS)}")

    sections = {}
    for sec in ("model", "geometry", "numerics", "output"):
        body = raw.get(sec, {})
        if not isinstance(body, dict):
            raise ConfigError(f"{sec}: expected a table")
        for key, val in body.items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {sec}.{key}")
            _check_type(f"{sec}.{key}", val, SCHEMA[sec][key])
        sections[sec] = body

    registry = Registry()
    reg = raw.get("register", [])
    if not isinstance(reg, list):
        raise ConfigError("register: expected an array of tables ([[register]])")
    for i, entry in enumerate(reg):
        _register(registry, i, entry)

    model = sections["model"]
    if "name" not in model:
        raise ConfigError("missing required key model.name")
    params = dict(model.get("params", {}))
    try:
        lag = registry.build(model["name"], params)
    except (HerglotzError, TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from exc

    geo = dict(sections["geometry"])
    for key in REQUIRED[task]:
        if key not in geo:
            raise ConfigError(f"missing required key geometry.{key}")
    for key in ("x0", "x1"):
        if key in geo:
            geo[key] = [float(v) for v in np.atleast_1d(np.asarray(geo[key], dtype=float))]
            if len(geo[key]) != lag.dim:
                raise ConfigError(f"geometry.{key}: model has dim {lag.dim}, got {len(geo[key])} coordinates")
    for key in ("t", "u0"):
        if key in geo:
            geo[key] = float(geo[key])
    if "t" in geo and not geo["t"] > 0:
        raise ConfigError("geometry.t: must be positive")
    if "t_grid" in geo:
        tg = _grid("geometry.t_grid", geo["t_grid"])
        if tg.size == 0 or not np.all(tg > 0) or not np.all(np.diff(tg) > 0):
            raise ConfigError("geometry.t_grid: must be nonempty, positive and increasing")
        geo["t_grid"] = [float(v) for v in tg]
    if "x_grid" in geo:
        geo["x_grid"] = [[float(v) for v in ax] for ax in _x_grid(geo["x_grid"], lag.dim)]

    num = {**NUMERIC_DEFAULTS, **sections["numerics"]}
    if "gtol" in sections["numerics"]:
        num["gtol"] = float(num["gtol"])
    num.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if num["N"] < 8:
        raise ConfigError("numerics.N: must be at least 8")
    if num["steps"] < 1:
        raise ConfigError("numerics.steps: must be positive")
    if num["hamiltonian"] not in ("legendre", "closed-form"):
        raise ConfigError("numerics.hamiltonian: must be 'legendre' or 'closed-form'")

    out = sections["output"]
    formats = list(out.get("formats", ["csv", "json"]))
    for f in formats:
        if f not in FORMATS:
            raise ConfigError(f"output.formats: {f!r} is not one of {', '.join(FORMATS)}")
    return ExperimentConfig(
        task=task,
        model=model["name"],
        params=dict(sorted(dict(lag.registry_key[1]).items())),
        geometry=geo,
        numerics=num,
        directory=out.get("directory", "herglotz-out"),
        formats=formats,
        registry=registry,
    )


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


class Artifacts:
    """Collects output files; all writes happen in this (single) process."""

    def __init__(self, directory, formats):
        self.directory = directory
        self.formats = formats
        self.files = []
        os.makedirs(directory, exist_ok=True)

    def _add(self, name, fmt, text):
        with open(os.path.join(self.directory, name), "w", newline="", encoding="utf-8") as fp:
            fp.write(text)
        self.files.append({"path": name, "format": fmt})

    def csv(self, name, header, rows):
        if "csv" not in self.formats:
            return
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
        self._add(name, "csv", buf.getvalue())

    def plotdata(self, name, xs, ys, label):
        if "plotdata" not in self.formats:
            return
        lines = [f"# {label}"] + [f"{_fmt(a)} {_fmt(b)}" for a, b in zip(xs, ys)]
        self._add(name, "plotdata", "\n".join(lines) + "\n")

    def table(self, tab):
        if "csv" not in self.formats and "json" not in self.formats:
            return
        value.save_table(tab, os.path.join(self.directory, "table"))
        self.files.append({"path": "table.json", "format": "json"})
        self.files.append({"path": "table.csv", "format": "csv"})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return str(v)


def _num(v):
    """JSON-safe float (nan/inf become strings so the manifest stays strict JSON)."""
    v = float(v)
    return v if math.isfinite(v) else repr(v)


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------


def _hamiltonian(cfg, lag):
    if cfg.numerics["hamiltonian"] == "closed-form":
        try:
            return closed_form_hamiltonian(lag)
        except HerglotzError as exc:
            raise ConfigError(f"numerics.hamiltonian: {exc}") from exc
    return make_hamiltonian(lag)


def _path_files(art, lag, res, stem="path"):
    path, trace = res.path, res.trace
    Ls = cara.lagrangian_along(lag, path, trace)
    pts = path.points()
    header = ["s"] + [f"x{i}" for i in range(path.dim)] + ["u", "L"]
    art.csv(f"{stem}.csv", header, [[s, *x, u, L] for s, x, u, L in zip(path.times(), pts, trace.u, Ls)])
    art.plotdata(f"{stem}_x.dat", path.times(), pts[:, 0], "s x0")
    art.plotdata(f"{stem}_u.dat", path.times(), trace.u, "s u")


def _minimize_metrics(res):
    return {
        "action": _num(res.action),
        "u_final": _num(res.u0 + res.action),
        "grad_inf_norm": _num(res.grad_inf_norm),
        "gtol": _num(res.gtol),
        "erdmann_spread": _num(res.erdmann_spread),
        "erdmann_tol": _num(res.erdmann_tol),
        "herglotz_residual": _num(res.herglotz_residual),
        "iterations": res.iterations,
    }


def _minimize(cfg, lag):
    g = cfg.geometry
    return direct.minimize(lag, g["x0"], g["x1"], g["t"], g["u0"], cfg.options())


def task_minimize(cfg, lag, art, jobs):
    res = _minimize(cfg, lag)
    _path_files(art, lag, res)
    inv = {
        "converged": res.converged,
        "erdmann": res.erdmann_spread <= res.erdmann_tol,
        "lower_bound": cara.check_lower_bound(res.trace, lag).passed,
    }
    return _minimize_metrics(res), inv


def _shoot(cfg, lag, p_init=None):
    g = cfg.geometry
    ham = _hamiltonian(cfg, lag)
    orbit, p0 = chars.shoot(ham, g["x0"], g["x1"], g["t"], g["u0"], p_init=p_init, steps=cfg.numerics["steps"])
    return ham, orbit, p0


def task_shoot(cfg, lag, art, jobs):
    ham, orbit, p0 = _shoot(cfg, lag)
    g = cfg.geometry
    n = lag.dim
    header = ["s"] + [f"x{i}" for i in range(n)] + [f"p{i}" for i in range(n)] + ["u", "H"]
    rows = [[orbit.s[i], *orbit.x[i], *orbit.p[i], orbit.u[i], orbit.H[i]] for i in range(len(orbit))]
    art.csv("orbit.csv", header, rows)
    art.plotdata("orbit_u.dat", orbit.s, orbit.u, "s u")
    art.plotdata("orbit_H.dat", orbit.s, orbit.H, "s H")
    miss = float(np.linalg.norm(orbit.x[-1] - np.asarray(g["x1"])))
    e_drift = chars.energy_drift(orbit)
    metrics = {
        "p0": [_num(v) for v in p0],
        "action": _num(orbit.u[-1] - g["u0"]),
        "u_final": _num(orbit.u[-1]),
        "endpoint_miss": _num(miss),
        "energy_drift": _num(e_drift),
        "action_drift": _num(chars.action_drift(orbit, ham)),
        "flow_error_estimate": _num(orbit.error_estimate),
    }
    inv = {"refined": bool(orbit.refined), "energy_identity": e_drift <= 1e-6}
    return metrics, inv


def task_table(cfg, lag, art, jobs):
    g = cfg.geometry
    tab = value.build_table(
        lag,
        g["x0"],
        g["u0"],
        g["t_grid"],
        g["x_grid"],
        cfg.options(),
        jobs=jobs,
        warm_start=cfg.numerics["warm_start"],
    )
    art.table(tab)
    ok = tab.status == value.OK
    metrics = {
        "cells": int(tab.h.size),
        "converged_cells": int(ok.sum()),
        "failed_cells": int((tab.status == value.FAILED).sum()),
        "h_min": _num(np.nanmin(tab.h)) if np.any(np.isfinite(tab.h)) else "nan",
        "h_max": _num(np.nanmax(tab.h)) if np.any(np.isfinite(tab.h)) else "nan",
    }
    inv = {"all_cells_converged": bool(ok.all())}
    if all(n >= 3 for n in tab.h.shape):
        res = value.hj_residual(tab, _hamiltonian(cfg, lag))
        summ = value.hj_summary(res)
        metrics["hj_residual_max"] = _num(summ["max_abs"])
        metrics["hj_residual_rms"] = _num(summ["rms"])
        metrics["hj_excluded_cells"] = summ["excluded_cells"]
        if "csv" in cfg.formats:
            mask = np.ma.getmaskarray(res)
            pts = tab.points()
            rows = []
            for idx in np.ndindex(res.shape):
                full = tuple(k + 1 for k in idx)
                x = pts[full[1:]]
                rows.append([tab.t_grid[full[0]], *x, float(res.data[idx]), "excluded" if mask[idx] else "smooth"])
            header = ["t"] + [f"x{d}" for d in range(tab.dim)] + ["residual", "region"]
            art.csv("hj_residual.csv", header, rows)
    try:
        passed, gap, bound = value.continuity_anchor(tab)
        metrics["anchor_gap"] = _num(gap)
        inv["continuity_anchor"] = passed
    except KeyError:
        pass
    if tab.dim == 1 and "plotdata" in cfg.formats:
        art.plotdata("table_last_time.dat", tab.x_axes[0], tab.h[-1], f"x h(t={tab.t_grid[-1]!r})")
    return metrics, inv


def task_invariants(cfg, lag, art, jobs):
    g = cfg.geometry
    opts = cfg.options()
    res = _minimize(cfg, lag)
    _path_files(art, lag, res)
    metrics = _minimize_metrics(res)
    inv = {"converged": res.converged, "erdmann": res.erdmann_spread <= res.erdmann_tol}

    rep = direct.reparametrization_test(lag, res, alpha_seed=cfg.numerics["seed"])
    metrics["reparametrization_worst_margin"] = _num(rep.worst_margin)
    inv["reparametrization"] = rep.passed

    low = cara.check_lower_bound(res.trace, lag)
    metrics["lower_bound_margin"] = _num(low.margin)
    inv["lower_bound"] = low.passed
    R = float(np.linalg.norm(np.subtract(g["x1"], g["x0"])))
    up = cara.check_upper_bound(res.trace, lag, R)
    metrics["upper_bound_margin"] = _num(up.margin)
    inv["upper_bound"] = up.passed

    w = direct.adjoint_weights(lag, res.path, res.trace)
    inv["adjoint_weights"] = w.check(lag.K, g["t"])

    # gradient against symmetric differences on a perturbed path
    rng = np.random.default_rng(cfg.numerics["seed"])
    probe = res.path.with_nodes(res.path.nodes + 0.05 * rng.standard_normal(res.path.nodes.shape))
    sub = cara.solve(lag, probe, g["u0"], tol=opts.tol).substeps
    _, grad = direct.action_gradient(lag, probe, g["u0"], substeps=sub)
    k = probe.N // 2
    eps = 1e-6
    fd = []
    for i in range(probe.dim):
        plus, minus = probe.nodes.copy(), probe.nodes.copy()
        plus[k - 1, i] += eps
        minus[k - 1, i] -= eps
        fp = cara.solve(lag, probe.with_nodes(plus), g["u0"], substeps=sub).action
        fm = cara.solve(lag, probe.with_nodes(minus), g["u0"], substeps=sub).action
        fd.append((fp - fm) / (2 * eps))
    fd = np.asarray(fd)
    rel = float(np.max(np.abs(grad[k - 1] - fd)) / max(1e-12, float(np.max(np.abs(fd)))))
    metrics["gradient_rel_error"] = _num(rel)
    inv["gradient"] = rel <= 1e-4

    shell = value.ValueTable(
        x0=np.asarray(g["x0"]),
        u0=g["u0"],
        t_grid=np.array([g["t"]]),
        x_axes=[np.array([c]) for c in g["x1"]],
        h=np.array([res.u0 + res.action]).reshape((1,) * (1 + lag.dim)),
        status=np.full((1,) * (1 + lag.dim), value.OK),
        model=cfg.model,
        model_params=cfg.params,
        options=asdict(opts),
        lag=lag,
    )
    if res.path.N >= 20:
        eq = value.check_equivalence(shell, res)
        metrics["dynamic_programming_worst_margin"] = _num(eq.worst_margin)
        metrics["dynamic_programming_max_delta"] = _num(
            max(max(abs(r["prefix_delta"]), abs(r["concat_delta"])) for r in eq.detail["splits"])
        )
        inv["dynamic_programming"] = eq.passed

    ham = _hamiltonian(cfg, lag)
    p_mid = chars.dual_arc(lag, res.path, res.trace)
    orbit = chars.flow(ham, chars.ContactState(g["x0"], chars.initial_covector(p_mid), g["u0"]), g["t"],
                       cfg.numerics["steps"], check=False)
    drift = chars.energy_drift(orbit)
    metrics["energy_drift"] = _num(drift)
    inv["energy_identity"] = drift <= 1e-6
    return metrics, inv


def task_compare(cfg, lag, art, jobs):
    g = cfg.geometry
    tol = cfg.numerics["compare_tol"]
    res = _minimize(cfg, lag)
    # warm start from the direct method's dual arc
    p_init = chars.initial_covector(chars.dual_arc(lag, res.path, res.trace))
    _, orbit, p0 = _shoot(cfg, lag, p_init)
    values = {"direct": res.u0 + res.action, "characteristics": float(orbit.u[-1])}
    ref = _oracle_value(lag, g)
    if ref is not None:
        values["oracle"] = ref
    names = list(values)
    deltas = {}
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            deltas[f"{a}-{b}"] = values[a] - values[b]
    art.csv("compare.csv", ["method", "u_final"], [[k, v] for k, v in values.items()])
    _path_files(art, lag, res)
    metrics = {
        "values": {k: _num(v) for k, v in values.items()},
        "deltas": {k: _num(v) for k, v in deltas.items()},
        "p0": [_num(v) for v in p0],
        "erdmann_spread": _num(res.erdmann_spread),
    }
    inv = {"converged": res.converged, "agreement": all(abs(d) <= tol for d in deltas.values())}
    if ref is None:
        metrics["oracle"] = "not available for this model"
    return metrics, inv


def _oracle_value(lag, g):
    p = dict(lag.params)
    if p.get("amplitude", 0.0) != 0.0:
        return None
    if lag.name == "quadratic-free":
        return oracle.discounted_value("quadratic-free", 0.0, g["x0"], g["x1"], g["t"], g["u0"])
    if lag.name == "discounted":
        return oracle.discounted_value("quadratic-free", p["lam"], g["x0"], g["x1"], g["t"], g["u0"])
    return None


TASK_FUNCS = {
    "minimize": task_minimize,
    "shoot": task_shoot,
    "table": task_table,
    "invariants": task_invariants,
    "compare": task_compare,
}


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(obj, fp, indent=2, sort_keys=True, allow_nan=False)
        fp.write("\n")


def run(config_path, output=None, jobs=None, seed=None, stream=None) -> int:
    """Execute one experiment; returns the exit status."""
    stream = stream or sys.stderr
    try:
        with open(config_path, encoding="utf-8") as fp:
            text = fp.read()
    except OSError as exc:
        print(f"config error: cannot read {config_path}: {exc}", file=stream)
        return 2
    try:
        cfg = parse_config(text, {"seed": seed})
    except ConfigError as exc:
        print(f"config error: {exc}", file=stream)
        return 2
    if jobs is None:
        env = os.environ.get("HERGLOTZ_JOBS")
        try:
            jobs = int(env) if env else 1
        except ValueError:
            print(f"config error: HERGLOTZ_JOBS={env!r} is not an integer", file=stream)
            return 2
    jobs = max(1, jobs)
    directory = output or cfg.directory
    art = Artifacts(directory, cfg.formats)
    lag = cfg.registry.build(cfg.model, cfg.params)

    manifest = {
        "tool": "herglotz",
        "version": __version__,
        "config": cfg.echo(),
        "task": cfg.task,
    }
    start = time.perf_counter()
    status = 0
    try:
        with np.errstate(all="ignore"):
            metrics, inv = TASK_FUNCS[cfg.task](cfg, lag, art, jobs)
        inv = {k: bool(v) for k, v in inv.items()}
        manifest["metrics"] = metrics
        manifest["invariants"] = inv
        manifest["status"] = "ok" if all(inv.values()) else "invariant-failure"
        if not all(inv.values()):
            status = 1
            failed = ", ".join(k for k, v in inv.items() if not v)
            print(f"invariant failure: {failed}", file=stream)
    except (HerglotzError, FloatingPointError, np.linalg.LinAlgError) as exc:
        manifest["status"] = "numeric-failure"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        manifest["metrics"] = {}
        manifest["invariants"] = {}
        status = 1
        print(f"numeric failure: {manifest['error']}", file=stream)
    except ConfigError as exc:
        print(f"config error: {exc}", file=stream)
        return 2
    wall = time.perf_counter() - start
    manifest["files"] = art.files
    # wall time lives in a sidecar so the manifest itself is reproducible
    manifest["timing_file"] = "timing.json"
    _write_json(os.path.join(directory, "manifest.json"), manifest)
    _write_json(os.path.join(directory, "timing.json"), {"wall_time_s": wall, "jobs": jobs})
    return status


def list_models(registry: Registry | None = None, check: bool = False) -> str:
    """Text listing of registry names, parameters and the conditions they satisfy."""
    registry = Registry() if registry is None else registry
    if not registry.entries:
        return "(no models registered)"
    if not check:
        return registry.listing()
    lines = []
    for name in registry.names():
        rep = check_conditions(registry.build(name), Box(), n_samples=200)
        flags = " ".join(f"{k}:{'pass' if r.passed else 'FAIL'}" for k, r in rep.results.items())
        lines.append(f"{name}\n    sampled: {flags}")
    return registry.listing() + "\n" + "\n".join(lines)


def build_parser():
    ap = argparse.ArgumentParser(prog="herglotz", description="Herglotz variational principle experiments")
    sub = ap.add_subparsers(dest="command")
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("--config", required=True, help="TOML experiment file")
    r.add_argument("--output", help="output directory (overrides output.directory)")
    r.add_argument("--jobs", type=int, help="worker processes for table builds (env HERGLOTZ_JOBS)")
    r.add_argument("--seed", type=int, help="multistart seed (overrides numerics.seed)")
    m = sub.add_parser("models", help="list registered models")
    m.add_argument("--config", help="also include models registered in this config")
    m.add_argument("--check", action="store_true", help="sample conditions for each model")
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0].startswith("--") and argv[0] not in ("--help",):
        argv = ["run"] + argv
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return run(args.config, args.output, args.jobs, args.seed)
    if args.command == "models":
        registry = Registry()
        if args.config:
            try:
                with open(args.config, encoding="utf-8") as fp:
                    raw = tomli.loads(fp.read())
                for i, entry in enumerate(raw.get("register", [])):
                    _register(registry, i, entry)
            except (OSError, tomli.TOMLDecodeError, ConfigError) as exc:
                print(f"config error: {exc}", file=sys.stderr)
                return 2
        print(list_models(registry, args.check))
        return 0
    build_parser().print_help()
    return 2


if __name__ == "__main__":
    sys.exit(main())
