"""Shared benchmark problems and hand-built models for the test suite."""

import math
import sys
from dataclasses import dataclass, field

import numpy as np
import pytest

from herglotz.model import Envelope, LagrangianModel, build_model


@dataclass
class Benchmark:
    name: str
    model: str
    params: dict
    x0: list
    x1: list
    t: float
    u0: float
    reference: float | None = None
    extra: dict = field(default_factory=dict)

    def lag(self):
        return build_model(self.model, self.params)


DISCOUNTED_REF = 1.0 / (2.0 * (math.e - 1.0))

BENCHMARKS = [
    Benchmark("quadratic-free", "quadratic-free", {}, [0.0], [1.0], 1.0, 0.0, 0.5),
    Benchmark("discounted", "discounted", {"lam": 1.0}, [0.0], [1.0], 1.0, 0.0, DISCOUNTED_REF),
    Benchmark("mechanical", "mechanical", {}, [0.0], [math.pi], 1.0, 0.0),
    Benchmark("bounded-contact", "bounded-contact", {"k": 0.5}, [0.0], [1.0], 1.0, 0.3),
]

BUILTIN = ["quadratic-free", "mechanical", "discounted", "bounded-contact"]


@pytest.fixture(params=BENCHMARKS, ids=[b.name for b in BENCHMARKS])
def benchmark_problem(request):
    return request.param


def cosh_model():
    """``L = cosh(|v|) - 1`` in one dimension (no x or u dependence)."""

    def ev(x, u, v):
        return np.cosh(np.asarray(v, float)[..., 0]) - 1.0

    def gv(x, u, v):
        return np.sinh(np.asarray(v, float))

    def hvv(x, u, v):
        v = np.asarray(v, float)
        return np.cosh(v)[..., None]

    return LagrangianModel(
        dim=1,
        eval=ev,
        grad_x=lambda x, u, v: np.zeros(np.shape(v)),
        grad_v=gv,
        du=lambda x, u, v: np.zeros(np.shape(v)[:-1]) if np.ndim(v) > 1 else 0.0,
        hess_vv=hvv,
        K=0.0,
        c0=1.0,
        theta0=Envelope(0.5, 2.0),
        theta0_bar=Envelope(1.0, 2.0, 10.0),
        name="cosh",
    )


def quartic_model():
    """``L = |v|^4/4 + cos(x_1)`` in one dimension."""

    def ev(x, u, v):
        v = np.asarray(v, float)[..., 0]
        return 0.25 * v**4 + np.cos(np.asarray(x, float)[..., 0])

    def gx(x, u, v):
        return -np.sin(np.asarray(x, float)) + 0.0 * np.asarray(v, float)

    def gv(x, u, v):
        return np.asarray(v, float) ** 3

    def hvv(x, u, v):
        # the +1e-3 keeps L1 strict at v = 0 for the sampler; L itself is unchanged
        return (3.0 * np.asarray(v, float) ** 2 + 1e-3)[..., None]

    return LagrangianModel(
        dim=1,
        eval=ev,
        grad_x=gx,
        grad_v=gv,
        du=lambda x, u, v: np.zeros(np.shape(v)[:-1]) if np.ndim(v) > 1 else 0.0,
        hess_vv=hvv,
        K=0.0,
        c0=1.0,
        theta0=Envelope(0.25, 4.0),
        theta0_bar=Envelope(0.25, 4.0, 1.0),
        name="quartic",
    )


def nonconvex_model():
    """``L = v^2/2 - v^4/8``: fails (L1) for ``|v| > 2/sqrt(3)``."""

    def ev(x, u, v):
        v = np.asarray(v, float)[..., 0]
        return 0.5 * v**2 - v**4 / 8.0

    return LagrangianModel(
        dim=1,
        eval=ev,
        grad_x=lambda x, u, v: np.zeros(np.shape(v)),
        grad_v=lambda x, u, v: np.asarray(v, float) - 0.5 * np.asarray(v, float) ** 3,
        du=lambda x, u, v: np.zeros(np.shape(v)[:-1]) if np.ndim(v) > 1 else 0.0,
        hess_vv=lambda x, u, v: (1.0 - 1.5 * np.asarray(v, float) ** 2)[..., None],
        K=0.0,
        c0=0.0,
        theta0=Envelope(0.1, 2.0),
        theta0_bar=Envelope(1.0, 2.0),
        name="nonconvex",
    )


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
