import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from conftest import BUILTIN, cosh_model, nonconvex_model, quartic_model
from herglotz.errors import UnsupportedModel
from herglotz.model import (
    Box,
    Envelope,
    Registry,
    build_model,
    check_conditions,
    closed_form_hamiltonian,
    legendre_transform,
    make_hamiltonian,
)


def test_legendre_self_dual_quadratic():
    lag = build_model("quadratic-free", {"dim": 2})
    val, v = legendre_transform(lag, np.zeros(2), 0.0, np.array([1.0, 0.0]))
    assert val == pytest.approx(0.5, abs=1e-12)
    np.testing.assert_allclose(v, [1.0, 0.0], atol=1e-12)


def test_legendre_affine_in_u():
    lag = build_model("discounted", {"lam": 1.0})
    val, v = legendre_transform(lag, np.zeros(1), 2.0, np.zeros(1))
    assert val == pytest.approx(2.0, abs=1e-12)
    np.testing.assert_allclose(v, [0.0], atol=1e-12)


def test_legendre_cosh_against_grid_search():
    lag = cosh_model()
    p = 1.0
    grid = np.arange(-10.0, 10.0 + 1e-4, 1e-4)
    obj = p * grid - (np.cosh(grid) - 1.0)
    j = int(np.argmax(obj))
    ref = minimize_scalar(lambda w: -(p * w - (math.cosh(w) - 1.0)), bracket=(grid[j - 1], grid[j], grid[j + 1]),
                          tol=1e-14)
    val, v = legendre_transform(lag, np.zeros(1), 0.0, np.array([p]))
    assert v[0] == pytest.approx(ref.x, abs=1e-8)
    assert val == pytest.approx(-ref.fun, abs=1e-8)
    # exact: v = asinh(1), value = v - (sqrt(2) - 1)
    assert v[0] == pytest.approx(math.asinh(1.0), abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(
    p=st.floats(-5, 5),
    w=st.floats(-5, 5),
    x=st.floats(-3, 3),
    u=st.floats(-2, 2),
    name=st.sampled_from(BUILTIN),
)
def test_fenchel_young(p, w, x, u, name):
    lag = build_model(name)
    val, v = legendre_transform(lag, np.array([x]), u, np.array([p]))
    # stationarity of the maximizer
    assert abs(lag.grad_v(np.array([x]), u, v)[0] - p) <= 1e-10 * (1 + abs(p))
    # H(p) >= p w - L(w) for any w
    assert val >= p * w - lag.eval(np.array([x]), u, np.array([w])) - 1e-9


@pytest.mark.parametrize("name", BUILTIN)
def test_numeric_hamiltonian_matches_closed_form(name):
    lag = build_model(name, {"dim": 2} if name != "quadratic-free" else {"dim": 2})
    H1, H2 = make_hamiltonian(lag), closed_form_hamiltonian(lag)
    rng = np.random.default_rng(3)
    for _ in range(20):
        x, p = rng.uniform(-2, 2, 2), rng.uniform(-3, 3, 2)
        u = rng.uniform(-1, 1)
        a, b = H1.all(x, u, p), H2.all(x, u, p)
        for left, right in zip(a, b):
            np.testing.assert_allclose(left, right, atol=1e-9)


def test_hamiltonian_batches():
    H = make_hamiltonian(build_model("mechanical"))
    x = np.linspace(-1, 1, 6).reshape(3, 2, 1)
    p = np.ones((3, 2, 1))
    u = np.zeros((3, 2))
    out = H.eval(x, u, p)
    assert np.shape(out) == (3, 2)
    assert out[0, 0] == pytest.approx(H.eval(x[0, 0], 0.0, p[0, 0]))


@pytest.mark.parametrize("name", BUILTIN)
def test_builtins_satisfy_conditions(name):
    rep = check_conditions(build_model(name), Box(v=(-3.0, 3.0)), n_samples=500)
    assert rep.passed, rep.summary()


def test_builtins_in_two_dimensions():
    for name in BUILTIN:
        assert check_conditions(build_model(name, {"dim": 2}), n_samples=200).passed


def test_nonconvex_fails_l1_with_witness():
    rep = check_conditions(nonconvex_model(), Box(v=(-2.0, 2.0)), n_samples=200)
    assert not rep["L1"].passed
    assert abs(rep["L1"].witness[2][0]) > 2 / math.sqrt(3)


def test_wrong_k_fails_l3():
    lag = build_model("bounded-contact", {"k": 0.5})
    lag.K = 0.1
    assert not check_conditions(lag, n_samples=200)["L3"].passed


def test_broken_partial_detected():
    lag = build_model("mechanical")
    lag.grad_x = lambda x, u, v: np.zeros(np.shape(x))
    assert not check_conditions(lag, n_samples=100)["partials"].passed


def test_quartic_growth_constant():
    lag = quartic_model()
    rep = check_conditions(lag, Box(x=(-math.pi, math.pi), v=(-20.0, 20.0)), n_samples=4000)
    assert rep["L1"].passed and rep["L2"].passed
    c_a = rep["L2'"].detail["C_A"]
    # dense 1-D slice: the sup of L(x,0,1.5v)/(1+L(x,0,v)) approaches 1.5^4 from below
    v = np.linspace(-20, 20, 200001)
    best = 0.0
    for xv in np.linspace(-math.pi, math.pi, 9):
        num = 0.25 * (1.5 * v) ** 4 + math.cos(xv)
        den = 1.0 + 0.25 * v**4 + math.cos(xv)
        ok = den > 1e-12
        best = max(best, float(np.max(num[ok] / den[ok])))
    assert c_a <= best + 1e-9
    assert c_a >= 0.97 * 1.5**4
    assert best == pytest.approx(1.5**4, rel=2e-3)


def test_envelope_parse_and_validate():
    e = Envelope.parse("power(0.5,2)+1.5")
    assert (e.coef, e.power, e.const) == (0.5, 2.0, 1.5)
    assert e(2.0) == pytest.approx(3.5)
    with pytest.raises(ValueError):
        Envelope(1.0, 1.0)
    with pytest.raises(ValueError):
        Envelope.parse("linear(1)")


def test_registry():
    reg = Registry()
    assert set(BUILTIN) <= set(reg.names())
    lag = reg.build("discounted", {"lam": 0.25})
    assert lag.K == 0.25
    assert lag.registry_key == ("discounted", (("amplitude", 0.0), ("dim", 1), ("lam", 0.25)))
    with pytest.raises(UnsupportedModel):
        reg.build("discounted", {"mu": 1.0})
    with pytest.raises(UnsupportedModel):
        reg.build("nope")
    assert Registry({}).names() == []


def test_models_are_pure():
    lag = build_model("bounded-contact")
    x, v = np.array([0.3]), np.array([1.2])
    first = lag.partials(x, 0.4, v)
    lag.partials(np.array([5.0]), -3.0, np.array([-2.0]))
    second = lag.partials(x, 0.4, v)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a, b)
