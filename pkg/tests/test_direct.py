import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import BENCHMARKS, BUILTIN, DISCOUNTED_REF
from herglotz import caratheodory as cara
from herglotz import characteristics as chars
from herglotz import direct
from herglotz.caratheodory import DiscretePath
from herglotz.direct import MinimizeOptions, minimize
from herglotz.model import build_model, closed_form_hamiltonian
from herglotz.oracle import discounted_extremal


def _fd_grad(lag, path, u0, substeps, eps=1e-6):
    out = np.empty_like(path.nodes)
    for k in range(path.nodes.shape[0]):
        for i in range(path.dim):
            plus, minus = path.nodes.copy(), path.nodes.copy()
            plus[k, i] += eps
            minus[k, i] -= eps
            fp = cara.solve(lag, path.with_nodes(plus), u0, substeps=substeps).action
            fm = cara.solve(lag, path.with_nodes(minus), u0, substeps=substeps).action
            out[k, i] = (fp - fm) / (2 * eps)
    return out


def test_quadratic_line_is_stationary():
    path = DiscretePath.straight(0.0, 1.0, 1.0, 16)
    val, g = direct.action_gradient(build_model("quadratic-free"), path, 0.0)
    assert val == pytest.approx(0.5)
    assert np.max(np.abs(g)) <= 1e-12


def test_discounted_gradient_matches_finite_differences():
    lag = build_model("discounted", {"lam": 1.0})
    path = DiscretePath.straight(0.0, 1.0, 1.0, 16)
    sub = cara.solve(lag, path, 0.0).substeps
    val, g = direct.action_gradient(lag, path, 0.0, substeps=sub)
    fd = _fd_grad(lag, path, 0.0, sub)
    assert np.max(np.abs(g)) > 1e-3
    assert np.max(np.abs(g - fd)) <= 1e-4 * np.max(np.abs(fd))


@settings(max_examples=25, deadline=None)
@given(name=st.sampled_from(BUILTIN), seed=st.integers(0, 2**16), dim=st.sampled_from([1, 2]))
def test_directional_derivative(name, seed, dim):
    lag = build_model(name, {"dim": dim})
    rng = np.random.default_rng(seed)
    N = 12
    path = DiscretePath(1.0, np.zeros(dim), rng.normal(size=dim), rng.normal(size=(N - 1, dim)))
    eta = np.zeros_like(path.nodes)
    eta[rng.integers(N - 1)] = rng.normal(size=dim)
    sub = cara.solve(lag, path, 0.3).substeps
    _, g = direct.action_gradient(lag, path, 0.3, substeps=sub)
    h = 1e-5
    fp = cara.solve(lag, path.with_nodes(path.nodes + h * eta), 0.3, substeps=sub).action
    fm = cara.solve(lag, path.with_nodes(path.nodes - h * eta), 0.3, substeps=sub).action
    fd = (fp - fm) / (2 * h)
    assert abs(np.sum(g * eta) - fd) <= 1e-4 * max(abs(fd), 1e-3)


def test_adjoint_weights_bounds():
    lag = build_model("bounded-contact", {"k": 0.8})
    rng = np.random.default_rng(2)
    path = DiscretePath(1.5, [0.0], [1.0], rng.normal(size=(19, 1)))
    tr = cara.solve(lag, path, 0.5)
    w = direct.adjoint_weights(lag, path, tr)
    assert w.w[-1] == 1.0
    assert w.check(lag.K, 1.5)


def test_minimize_quadratic():
    res = minimize(build_model("quadratic-free"), 0.0, 1.0, 1.0, 0.0, MinimizeOptions(N=64))
    assert res.converged
    assert res.action == pytest.approx(0.5, abs=1e-12)
    assert res.erdmann_spread <= 1e-9
    assert res.herglotz_residual <= 1e-10
    assert res.action == res.trace.action
    E = direct.erdmann_profile(build_model("quadratic-free"), res.path, res.trace)
    np.testing.assert_allclose(E, 0.5, atol=1e-12)


def test_minimize_discounted_closed_form():
    lag = build_model("discounted", {"lam": 1.0})
    res = minimize(lag, 0.0, 1.0, 1.0, 0.0, MinimizeOptions(N=256))
    assert res.converged and res.grad_inf_norm <= res.gtol
    assert abs(res.action - DISCOUNTED_REF) <= 1e-6
    exact = discounted_extremal(1.0, [0.0], [1.0], 1.0, res.path.times())
    assert np.max(np.abs(res.path.points() - exact)) <= 1e-5
    assert res.erdmann_spread <= res.erdmann_tol
    # dual arc p = xi' = C e^{-s}
    p = chars.dual_arc(lag, res.path, res.trace)[:, 0]
    mids = res.path.times()[:-1] + res.path.h / 2
    np.testing.assert_allclose(p, np.exp(-mids) / (1 - math.exp(-1)), atol=1e-5)


def test_minimize_mechanical_matches_shooting():
    lag = build_model("mechanical")
    res = minimize(lag, 0.0, math.pi, 1.0, 0.0, MinimizeOptions(N=256))
    ham = closed_form_hamiltonian(lag)
    p0 = chars.initial_covector(chars.dual_arc(lag, res.path, res.trace))
    orbit, _ = chars.shoot(ham, 0.0, math.pi, 1.0, 0.0, p_init=p0)
    assert abs(res.action - orbit.u[-1]) <= 1e-6
    # paths agree in sup norm
    xs = np.interp(res.path.times(), orbit.s, orbit.x[:, 0])
    assert np.max(np.abs(xs - res.path.points()[:, 0])) <= 1e-3


def test_descent_history():
    lag = build_model("bounded-contact")
    res = minimize(lag, 0.0, 2.0, 1.0, 0.3, MinimizeOptions(N=32))
    h = np.asarray(res.history)
    assert len(h) >= 2
    assert np.all(np.diff(h) <= 64 * np.finfo(float).eps * (1 + np.abs(h[1:])))


def test_erdmann_rejects_straight_discounted():
    lag = build_model("discounted", {"lam": 1.0})
    path = DiscretePath.straight(0.0, 1.0, 1.0, 64)
    E = direct.erdmann_profile(lag, path, cara.solve(lag, path, 0.0))
    assert E.max() - E.min() > 0.01


def test_herglotz_residual_refinement_and_rejection():
    lag = build_model("discounted", {"lam": 1.0})
    r64 = minimize(lag, 0.0, 1.0, 1.0, 0.0, MinimizeOptions(N=64)).herglotz_residual
    r128 = minimize(lag, 0.0, 1.0, 1.0, 0.0, MinimizeOptions(N=128)).herglotz_residual
    assert r64 / r128 >= 1.8
    rng = np.random.default_rng(0)
    path = DiscretePath(1.0, [0.0], [1.0], rng.normal(size=(63, 1)))
    assert direct.herglotz_residual(lag, path, cara.solve(lag, path, 0.0)) > 0.1


def test_reparametrization():
    lag = build_model("quadratic-free")
    res = minimize(lag, 0.0, 1.0, 1.0, 0.0, MinimizeOptions(N=32))
    assert direct.reparametrized_action(lag, res.path, 0.0, np.ones(32)) == res.action
    rng = np.random.default_rng(5)
    for _ in range(5):
        alpha = direct.random_reparametrization(32, rng)
        assert abs(alpha.mean() - 1) <= 1e-15 and alpha.min() >= 0.5 and alpha.max() <= 1.5
        assert direct.reparametrized_action(lag, res.path, 0.0, alpha) > res.action
    lag = build_model("discounted", {"lam": 1.0})
    res = minimize(lag, 0.0, 1.0, 1.0, 0.0, MinimizeOptions(N=64))
    rep = direct.reparametrization_test(lag, res, alpha_seed=3)
    assert rep.passed and len(rep.values) == 20


@pytest.mark.parametrize("bench", BENCHMARKS, ids=[b.name for b in BENCHMARKS])
def test_lipschitz_stability(bench):
    lag = bench.lag()
    vmax = []
    for N in (128, 256):
        res = minimize(lag, bench.x0, bench.x1, bench.t, bench.u0, MinimizeOptions(N=N))
        vmax.append(np.max(np.abs(res.path.velocities())))
    assert abs(vmax[1] - vmax[0]) <= 0.05 * vmax[0]


def test_multistart_deterministic_and_no_worse():
    lag = build_model("mechanical", {"amplitude": 3.0})
    single = minimize(lag, 0.0, 2.0, 2.0, 0.0, MinimizeOptions(N=32))
    a = minimize(lag, 0.0, 2.0, 2.0, 0.0, MinimizeOptions(N=32, multistart=True, seed=4))
    b = minimize(lag, 0.0, 2.0, 2.0, 0.0, MinimizeOptions(N=32, multistart=True, seed=4))
    assert a.action == b.action
    np.testing.assert_array_equal(a.path.nodes, b.path.nodes)
    assert a.action <= single.action + 1e-9


def test_two_dimensional_minimize():
    lag = build_model("discounted", {"lam": 1.0, "dim": 2})
    res = minimize(lag, [0.0, 0.0], [1.0, 1.0], 1.0, 0.0, MinimizeOptions(N=64))
    assert res.converged
    assert res.action == pytest.approx(2 * DISCOUNTED_REF, abs=1e-4)


def test_small_n_rejected():
    with pytest.raises(ValueError):
        minimize(build_model("quadratic-free"), 0.0, 1.0, 1.0, 0.0, MinimizeOptions(N=4))
    with pytest.raises(ValueError):
        minimize(build_model("quadratic-free"), 0.0, 1.0, 0.0, 0.0)
