"""Random expression and network generators shared by several test modules."""
import numpy as np

from lyapcert import expr as ex

UNARY = ("neg", "sin", "cos", "tanh", "sq", "cube")
BINARY = ("add", "sub", "mul", "div")


def random_expr(rng, n_vars=2, depth=4):
    if depth == 0 or rng.random() < 0.2:
        if rng.random() < 0.7:
            return ex.var(int(rng.integers(n_vars)))
        return ex.const(float(np.round(rng.uniform(-3, 3), 3)))
    if rng.random() < 0.45:
        a = random_expr(rng, n_vars, depth - 1)
        op = UNARY[rng.integers(len(UNARY))]
        return {"neg": lambda: -a, "sin": lambda: ex.sin(a), "cos": lambda: ex.cos(a),
                "tanh": lambda: ex.tanh(a), "sq": lambda: a ** 2, "cube": lambda: a ** 3}[op]()
    a = random_expr(rng, n_vars, depth - 1)
    b = random_expr(rng, n_vars, depth - 1)
    op = BINARY[rng.integers(len(BINARY))]
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    # keep divisors away from zero
    return a / (1.5 + b ** 2)


def random_box(rng, n_vars=2, scale=2.0):
    c = rng.uniform(-scale, scale, n_vars)
    w = rng.uniform(0.0, scale, n_vars) * rng.choice([1e-3, 0.1, 1.0], n_vars)
    return ex.Box.from_bounds(c - w, c + w)


def points_in(rng, box, k):
    return rng.uniform(box.lo, box.hi, (k, box.dim))


def _quadratic(P, xs):
    n = len(xs)
    return ex.sum_exprs(float(P[i, j]) * xs[i] * xs[j] for i in range(n) for j in range(n))


def random_instance(rng):
    """A random falsification problem ``(V, lieV, domain, radius, eps, delta)``.

    Mixes three families so that both outcomes occur: random tanh networks
    under random feedback on a benchmark, exact quadratic Lyapunov functions
    of stable linear systems (Unsat), and the same quadratics with a small
    nonlinear perturbation (either outcome).
    """
    from lyapcert import bench, lqr
    from lyapcert.network import LinearController, LyapunovNet, compile_V, compile_lieV

    kind = rng.integers(3)
    if kind == 0:
        name = ["pendulum", "path_following"][rng.integers(2)]
        system = bench.build(name)
        net = LyapunovNet.random(2, (int(rng.integers(1, 5)),), seed=int(rng.integers(2 ** 31)))
        ctrl = LinearController(rng.normal(scale=5.0, size=(1, 2)))
        V = compile_V(net)
        lie = compile_lieV(net, system, ctrl, V)
        r = system.radius
        eps = float(rng.choice([0.01, 0.04, 0.1])) * r * r
        return V, lie, system.domain_box(), r, eps, 0.01 * np.sqrt(eps)
    n = 2
    xs = [ex.var(i) for i in range(n)]
    while True:
        A = rng.normal(size=(n, n))
        if lqr.hurwitz_check(A):
            break
    P = lqr._lyap(A, np.eye(n))
    V = _quadratic(P, xs)
    f = [ex.sum_exprs(float(A[i, j]) * xs[j] for j in range(n)) for i in range(n)]
    if kind == 2:
        c = float(rng.uniform(0.05, 1.0))
        f[0] = f[0] + c * xs[1] ** 2 * ex.sin(xs[0])
        V = V - float(rng.uniform(0.0, 0.2)) * xs[0] ** 2
    lie = ex.sum_exprs(ex.differentiate(V, i) * f[i] for i in range(n))
    r = float(rng.uniform(0.5, 3.0))
    eps = float(rng.uniform(0.01, 0.1)) * r * r
    return V, lie, ex.Box.cube(n, r), r, eps, 0.01 * np.sqrt(eps)


def sampling_oracle(V, lie, radius, eps, n, rng, count=100000):
    """Uniform samples in the ball; returns violating points of the exact constraint."""
    X = rng.uniform(-radius, radius, (count, n))
    r2 = np.sum(X ** 2, axis=1)
    X = X[(r2 <= radius ** 2) & (r2 >= eps)]
    bad = (ex.evaluate(V, X) <= 0.0) | (ex.evaluate(lie, X) >= 0.0)
    return X[bad]


def fd_check(net, ctrl, system, X, cfg, rng):
    """Max relative error of the analytic risk gradient against central differences."""
    from lyapcert.network import LinearController
    from lyapcert.training import TrainingSet, empirical_risk, risk_gradient

    ts = TrainingSet(X)
    g_theta, g_K = risk_gradient(net, ctrl, system, ts, cfg)
    theta, K = net.parameters(), np.array(ctrl.K)
    h = 1e-5

    def risk(th, KK):
        return empirical_risk(net.with_parameters(th), LinearController(KK), system, ts, cfg)

    errs = []
    for i in rng.choice(theta.size, size=min(12, theta.size), replace=False):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        fd = (risk(tp, K) - risk(tm, K)) / (2 * h)
        errs.append(abs(fd - g_theta[i]) / max(1e-3, abs(fd)))
    for j in range(K.size):
        Kp, Km = K.copy(), K.copy()
        Kp.flat[j] += h
        Km.flat[j] -= h
        fd = (risk(theta, Kp) - risk(theta, Km)) / (2 * h)
        errs.append(abs(fd - g_K.flat[j]) / max(1e-3, abs(fd)))
    return max(errs)


def away_from_kinks(net, ctrl, system, X, tol=1e-3):
    from lyapcert.network import lie_derivative_at

    V = net(X)
    L = lie_derivative_at(net, system, ctrl, X)
    return X[(np.abs(V) > tol) & (np.abs(L) > tol)]


# PASS/FAIL lines from the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []
