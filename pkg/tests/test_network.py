import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lyapcert import expr as ex
from lyapcert.network import (DimensionMismatch, LinearController, LyapunovNet, SystemSpec,
                              closed_loop, compile_lieV, compile_V, lie_derivative_at,
                              load_checkpoint, save_checkpoint)
from lyapcert.network import gradient


def one_unit(w=(1.0, 0.0), b=0.0):
    return LyapunovNet([(np.array([list(w)]), np.array([b])),
                        (np.array([[1.0]]), np.array([0.0]))], output_tanh=False)


def test_zero_network_is_zero():
    net = LyapunovNet.zeros(2)
    X = np.random.default_rng(0).normal(size=(20, 2))
    assert np.all(net(X) == 0.0)
    V = compile_V(net)
    assert V.is_const and V.value == 0.0


def test_one_unit_values():
    net = one_unit()
    assert net(np.array([0.0, 5.0])) == 0.0
    assert net(np.array([1.0, 0.0])) == pytest.approx(0.761594, abs=1e-6)


def test_one_unit_compiled_shape():
    net = LyapunovNet([(np.array([[0.5, 0.0]]), np.array([0.25]))], output_tanh=True)
    assert ex.to_sexpr(compile_V(net)) == "(tanh (add (mul 0.5 (var 0)) 0.25))"


def test_shape_validation():
    with pytest.raises(DimensionMismatch):
        LyapunovNet([(np.zeros((3, 2)), np.zeros(2)), (np.zeros((1, 3)), np.zeros(1))])
    with pytest.raises(DimensionMismatch):
        LyapunovNet([(np.zeros((3, 2)), np.zeros(3))])
    net = LyapunovNet.random(2)
    with pytest.raises(DimensionMismatch):
        net.with_parameters(np.zeros(net.n_params + 1))


def test_default_architecture():
    net = LyapunovNet.random(2, seed=0)
    assert net.hidden == (6,) and net.n_params == 6 * 2 + 6 + 6 + 1
    deep = LyapunovNet.random(4, hidden=(6, 6), seed=0)
    assert deep.hidden == (6, 6)


def test_parameters_round_trip():
    net = LyapunovNet.random(3, hidden=(4, 5), seed=2)
    assert net.with_parameters(net.parameters()) == net


def test_compile_matches_forward():
    rng = np.random.default_rng(3)
    for hidden in ((6,), (6, 6)):
        net = LyapunovNet.random(2, hidden, seed=5)
        X = rng.uniform(-6, 6, (100, 2))
        assert np.max(np.abs(ex.evaluate(compile_V(net), X) - net(X))) <= 1e-12


def test_gradient_matches_finite_differences():
    net = LyapunovNet.random(2, (6, 6), seed=1)
    X = np.random.default_rng(0).normal(size=(5, 2))
    G = gradient(net, X)
    h = 1e-6
    for i in range(2):
        E = np.zeros(2)
        E[i] = h
        fd = (net(X + E) - net(X - E)) / (2 * h)
        np.testing.assert_allclose(G[:, i], fd, rtol=1e-6, atol=1e-9)


def test_closed_loop_examples():
    sys1 = SystemSpec(1, 1, (ex.var(1),), radius=1.0)
    f = closed_loop(sys1, LinearController([[-1.0]]))
    assert ex.eval_point(f[0], [2.0]) == -2.0
    di = SystemSpec(2, 1, (ex.var(1), ex.var(2)), radius=1.0)
    f = closed_loop(di, LinearController([[-1.0, -2.0]]))
    assert ex.eval_point(f[1], [3.0, 5.0]) == -3.0 - 10.0
    f0 = closed_loop(di, LinearController.zeros(1, 2))
    assert ex.eval_point(f0[1], [3.0, 5.0]) == 0.0


def test_lie_derivative_example():
    net = LyapunovNet([(np.array([[1.0]]), np.array([0.0]))], output_tanh=True)
    sys1 = SystemSpec(1, 1, (-ex.var(0) + ex.var(1),), radius=2.0)
    val = lie_derivative_at(net, sys1, LinearController.zeros(1, 1), np.array([1.0]))
    assert float(val) == pytest.approx(-0.419974, abs=1e-6)
    zero = LyapunovNet.zeros(1)
    assert float(lie_derivative_at(zero, sys1, LinearController.zeros(1, 1), [0.3])) == 0.0


def test_worked_example_constraint():
    # V = tanh(x0 + x1), f = (-x1^2, sin x0)
    net = LyapunovNet([(np.array([[1.0, 1.0]]), np.array([0.0]))], output_tanh=True)
    sysm = SystemSpec(2, 0, (-ex.var(1) ** 2, ex.sin(ex.var(0))), radius=2.0)
    lie = compile_lieV(net, sysm, LinearController(np.zeros((0, 2))))
    for p in ([0.3, -0.4], [1.0, 1.5]):
        t = math.tanh(p[0] + p[1])
        expect = (1 - t * t) * (-p[1] ** 2) + (1 - t * t) * math.sin(p[0])
        assert ex.eval_point(lie, p) == pytest.approx(expect, rel=1e-12)


@given(st.integers(0, 2 ** 32 - 1))
def test_lie_compiled_matches_numeric(seed):
    from lyapcert import bench

    rng = np.random.default_rng(seed)
    sysm = bench.build("pendulum")
    net = LyapunovNet.random(2, seed=seed % 1000)
    ctrl = LinearController(rng.normal(size=(1, 2)))
    lie = compile_lieV(net, sysm, ctrl)
    X = rng.uniform(-6, 6, (20, 2))
    a = ex.evaluate(lie, X)
    b = lie_derivative_at(net, sysm, ctrl, X)
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


@given(st.floats(-10, 10), st.integers(0, 1000))
def test_controller_linearity(a, seed):
    rng = np.random.default_rng(seed)
    c = LinearController(rng.normal(size=(2, 3)))
    x = rng.normal(size=3)
    np.testing.assert_allclose(c(a * x), a * c(x), rtol=1e-12, atol=1e-12)


def test_checkpoint_round_trip(tmp_path, pendulum):
    net = LyapunovNet.random(2, (6, 6), seed=4)
    ctrl = LinearController([[-3.0, -1.5]])
    p = save_checkpoint(tmp_path / "c.json", net, ctrl, pendulum, note="x")
    net2, ctrl2, sys2 = load_checkpoint(p)
    assert net2 == net and ctrl2 == ctrl
    assert sys2.to_dict() == pendulum.to_dict()
    X = np.random.default_rng(0).uniform(-6, 6, (10, 2))
    np.testing.assert_array_equal(pendulum.f(X, ctrl(X)), sys2.f(X, ctrl(X)))


def test_system_spec_validation():
    with pytest.raises(ValueError):
        SystemSpec(2, 1, (ex.var(1),), radius=1.0)
    with pytest.raises(ValueError):
        SystemSpec(1, 1, (ex.var(5),), radius=1.0)
