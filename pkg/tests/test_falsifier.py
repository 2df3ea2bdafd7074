import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lyapcert import expr as ex
from lyapcert.falsifier import (Atom, Budget, BudgetExhausted, DeltaSat, FalsificationProblem,
                                ProblemError, Unsat, check, max_delta, solve, verify_lyapunov,
                                write_counterexample_log)
from lyapcert.network import LinearController, LyapunovNet, load_checkpoint

from helpers import random_instance, sampling_oracle

x0, x1 = ex.var(0), ex.var(1)
R2 = x0 ** 2 + x1 ** 2


def problem(V, lie, r=6.0, eps=0.04, delta=0.01, relaxation=0.0):
    return FalsificationProblem(V, lie, ex.Box.cube(2, r), eps, delta, radius=r,
                                relaxation=relaxation)


def weakened_ok(p, w):
    v = ex.eval_point(p.V, w)
    lv = ex.eval_point(p.lieV, w)
    n2 = float(np.sum(np.square(w)))
    return (n2 >= p.epsilon and n2 <= p.radius ** 2
            and (v <= p.delta or lv >= p.relaxation - p.delta))


def test_quadratic_is_unsat():
    out = check(problem(R2, -2.0 * R2))
    assert isinstance(out, Unsat) and out.is_unsat
    assert out.boxes > 0


def test_negated_quadratic_is_delta_sat():
    p = problem(-R2, 2.0 * R2)
    out = check(p)
    assert isinstance(out, DeltaSat)
    assert weakened_ok(p, out.witness)
    assert out.box.contains(out.witness)


def test_worked_example_matches_grid_oracle():
    V = ex.tanh(x0 + x1)
    f = (-x1 ** 2, ex.sin(x0))
    lie = ex.sum_exprs(ex.differentiate(V, i) * f[i] for i in range(2))
    p = problem(V, lie, r=1.0, eps=0.01, delta=0.01)
    out = check(p)
    assert isinstance(out, DeltaSat)
    assert weakened_ok(p, out.witness)
    g = np.linspace(-1, 1, 400)
    G = np.array(np.meshgrid(g, g)).reshape(2, -1).T
    n2 = np.sum(G ** 2, axis=1)
    G = G[(n2 >= 0.01) & (n2 <= 1.0)]
    bad = G[(ex.evaluate(V, G) <= 0) | (ex.evaluate(lie, G) >= 0)]
    assert len(bad) > 0
    dist = np.min(np.linalg.norm(bad - out.witness, axis=1))
    assert dist <= np.max(out.box.widths) + 2 * (g[1] - g[0])


def test_zero_network_is_delta_sat(pendulum):
    out = verify_lyapunov(LyapunovNet.zeros(2), LinearController.zeros(1, 2), pendulum, 0.04, 0.01)
    assert isinstance(out, DeltaSat)


def test_shipped_checkpoint(pendulum):
    from importlib.resources import files

    net, ctrl, system = load_checkpoint(files("lyapcert") / "data" / "pendulum_certified.json")
    assert isinstance(verify_lyapunov(net, ctrl, system, 0.04, 0.01), Unsat)
    # epsilon ball covering the whole domain: vacuous
    with pytest.warns(UserWarning):
        assert isinstance(verify_lyapunov(net, ctrl, system, 100.0, 0.01), Unsat)


def test_delta_must_be_small():
    with pytest.raises(ProblemError):
        problem(R2, -R2, eps=0.04, delta=0.05)
    with pytest.raises(ProblemError):
        problem(R2, -R2, eps=0.0)
    assert max_delta(0.01) >= 0.01
    assert max_delta(0.04) >= 0.02


def test_large_epsilon_warns():
    with pytest.warns(UserWarning):
        problem(R2, -R2, r=0.5, eps=0.25, delta=0.01)


def test_budget_exhausted_is_distinct():
    p = problem(R2, -2.0 * R2)
    with pytest.raises(BudgetExhausted):
        check(p, Budget(max_boxes=5))


def test_budget_monotone():
    p = problem(R2 + 0.3 * ex.sin(x0) ** 2, -2.0 * R2)
    out = check(p)
    assert isinstance(out, Unsat)
    for b in (out.boxes, out.boxes * 2, 10 ** 7):
        assert isinstance(check(p, Budget(max_boxes=b)), Unsat)


def test_unsat_independent_of_workers():
    p = problem(R2, -2.0 * R2 + 0.5 * x0 * x1)
    one = check(p, workers=1)
    three = check(p, workers=3)
    assert type(one) is type(three)
    if isinstance(one, Unsat):
        assert one.boxes == three.boxes


def test_parallel_delta_sat_valid():
    p = problem(-R2, 2.0 * R2)
    out = check(p, workers=2)
    assert isinstance(out, DeltaSat) and weakened_ok(p, out.witness)


def test_relaxation_zero_matches_plain_check(pendulum_run):
    r = pendulum_run
    a = verify_lyapunov(r.net, r.ctrl, r.system, 0.04, 0.01)
    b = verify_lyapunov(r.net, r.ctrl, r.system, 0.04, 0.01, relaxation=0.0)
    assert type(a) is type(b)


def test_violated_label():
    # V fine, LieV positive: only the derivative condition fails
    p = problem(R2, 2.0 * R2)
    out = check(p)
    assert out.violated == "LieV>=0"


def test_generic_solver_atoms():
    # x0 in [0.5, 0.6] and x1 <= -3: sat inside the cube
    clauses = [[Atom(x0, ">=", 0.5, weaken=False)], [Atom(x0, "<=", 0.6, weaken=False)],
               [Atom(x1, "<=", -3.0, weaken=False)]]
    out = solve(clauses, ex.Box.cube(2, 4.0), 0.01)
    assert isinstance(out, DeltaSat)
    assert 0.5 <= out.witness[0] <= 0.6 and out.witness[1] <= -3.0
    clauses[2] = [Atom(x1, "<=", -5.0, weaken=False)]
    assert isinstance(solve(clauses, ex.Box.cube(2, 4.0), 0.01), Unsat)


@pytest.mark.filterwarnings("ignore::UserWarning")
@settings(max_examples=40)
@given(st.integers(0, 2 ** 31 - 1))
def test_soundness_against_sampling(seed):
    rng = np.random.default_rng(seed)
    V, lie, dom, r, eps, delta = random_instance(rng)
    p = FalsificationProblem(V, lie, dom, eps, delta, radius=r)
    try:
        out = check(p, Budget(max_boxes=200000, max_seconds=20))
    except BudgetExhausted:
        return
    bad = sampling_oracle(V, lie, r, eps, 2, rng, count=20000)
    if len(bad):
        assert not isinstance(out, Unsat)
    if isinstance(out, DeltaSat):
        assert weakened_ok(p, out.witness)


def test_counterexample_csv(tmp_path):
    rows = [(0, np.array([0.1, -0.2]), "V<=0"), (3, np.array([1.0, 2.0]), "both")]
    p = write_counterexample_log(tmp_path / "ce.csv", rows)
    got = list(csv.reader(p.open()))
    assert got[0] == ["cegis_iteration", "x0", "x1", "violated"]
    assert got[2][0] == "3" and got[2][-1] == "both"
