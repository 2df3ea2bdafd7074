"""Command-line entry point: ``lyapcert <subcommand>``.

Exit codes
----------
0  success (Certified / Unsat / command completed)
1  verify found a delta-sat witness
2  usage or configuration error (nothing was run)
3  synthesis Exhausted (iteration or wall-clock cap)
4  synthesis LearnerStuck
5  falsifier budget exhausted
6  LQR initialization failed
7  I/O error (missing or unreadable file)
8  ROA level could not be certified
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, cegis, roa
from .falsifier import Budget, BudgetExhausted, ProblemError, Unsat, max_delta, verify_lyapunov
from .lqr import lqr_controller
from .network import checkpoint_from_dict, compile_V

EXIT_OK = 0
EXIT_DELTA_SAT = 1
EXIT_USAGE = 2
EXIT_EXHAUSTED = 3
EXIT_STUCK = 4
EXIT_BUDGET = 5
EXIT_LQR = 6
EXIT_IO = 7
EXIT_ROA = 8

_OUTCOME_CODES = {cegis.CERTIFIED: EXIT_OK, cegis.EXHAUSTED: EXIT_EXHAUSTED,
                  cegis.LEARNER_STUCK: EXIT_STUCK}


class ConfigError(ValueError):
    pass


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(",", " ").split()]


def _matrix(text: str | None, size: int):
    """``"1,2"`` is a diagonal, ``n*n`` numbers are a full row-major matrix."""
    if text is None:
        return None
    v = _floats(text)
    if len(v) == size:
        return tuple(map(tuple, np.diag(v).tolist()))
    if len(v) == size * size:
        return tuple(map(tuple, np.reshape(v, (size, size)).tolist()))
    raise ConfigError(f"expected {size} or {size * size} numbers, got {len(v)}")


def _params(items) -> dict:
    out = {}
    for item in items or ():
        k, sep, v = item.partition("=")
        if not sep:
            raise ConfigError(f"--param expects key=value, got {item!r}")
        out[k] = json.loads(v)
    return out


# --------------------------------------------------------------------- config

_FLAG_TO_FIELD = {
    "hidden": "hidden", "lr": "learning_rate", "optimizer": "optimizer",
    "n_samples": "n_samples", "seed": "seed", "delta": "delta", "alpha": "roa_alpha",
    "max_cegis": "max_cegis_iterations", "max_seconds": "max_wall_seconds",
    "learner_max_iters": "learner_max_iters", "falsifier_max_boxes": "falsifier_max_boxes",
    "falsifier_max_seconds": "falsifier_max_seconds", "workers": "workers",
}


def build_run_config(args):
    """Merge ``--config`` JSON and flags into ``(system, SynthesisConfig, target_eps, out)``."""
    file_cfg = {}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{args.config}: {err}") from err
    run_keys = {"bench", "dynamics", "params", "radius", "out", "epsilon", "Q", "R"}
    syn = {k: v for k, v in file_cfg.items() if k not in run_keys}

    bench_name = args.bench or file_cfg.get("bench")
    dyn_file = args.dynamics or file_cfg.get("dynamics")
    if bool(bench_name) == bool(dyn_file):
        raise ConfigError("give exactly one of --bench or --dynamics")
    radius = args.radius if args.radius is not None else file_cfg.get("radius")
    try:
        if bench_name:
            params = {**file_cfg.get("params", {}), **_params(args.param)}
            system = bench.build(bench_name, params, radius)
            key = "nlink" if bench_name.startswith("nlink") else bench_name
            target = bench.BENCHMARKS[key].target_epsilon
        else:
            system = bench.load_system_file(dyn_file)
            target = None
    except (bench.UnknownBenchmark, bench.BadParams) as err:
        raise ConfigError(str(err)) from err

    for flag, name in _FLAG_TO_FIELD.items():
        val = getattr(args, flag, None)
        if val is not None:
            syn[name] = val
    if args.from_scratch:
        syn["from_scratch"] = True
    eps = args.eps if args.eps is not None else file_cfg.get("epsilon")
    if eps is not None:
        eps = _floats(eps) if isinstance(eps, str) else list(np.atleast_1d(eps))
        syn["epsilon_schedule"] = eps
    Q = args.Q if args.Q is not None else file_cfg.get("Q")
    R = args.R if args.R is not None else file_cfg.get("R")
    if isinstance(Q, str) or Q is None:
        syn["Q"] = _matrix(Q, system.n)
    else:
        syn["Q"] = Q
    if isinstance(R, str) or R is None:
        syn["R"] = _matrix(R, system.m)
    else:
        syn["R"] = R
    try:
        cfg = cegis.SynthesisConfig.from_dict(syn)
        cfg.validate(target)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    out = args.out or file_cfg.get("out") or f"runs/{system.name}_seed{cfg.seed}"
    return system, cfg, target, Path(out)


# ------------------------------------------------------------------- commands

def cmd_synthesize(args) -> int:
    system, cfg, target, out = build_run_config(args)
    try:
        report = cegis.synthesize(system, cfg, target, run_dir=out)
    except cegis.LqrInitFailed as err:
        print(f"LQR initialization failed: {err}", file=sys.stderr)
        return EXIT_LQR
    except BudgetExhausted as err:
        print(f"falsifier budget exhausted: {err}; raise the budget or try relaxation",
              file=sys.stderr)
        return EXIT_BUDGET
    print(report.to_text(), end="")
    print(f"run directory: {out}")
    return _OUTCOME_CODES[report.outcome]


def _load(path):
    """``(net, ctrl, system, meta)`` from a checkpoint file."""
    try:
        d = json.loads(Path(path).read_text())
        net, ctrl, system = checkpoint_from_dict(d)
    except FileNotFoundError as err:
        raise OSError(f"checkpoint not found: {path}") from err
    except (ValueError, KeyError, TypeError) as err:
        raise OSError(f"unreadable checkpoint {path}: {err}") from err
    return net, ctrl, system, d.get("meta", {})


def cmd_verify(args) -> int:
    net, ctrl, system, meta = _load(args.checkpoint)
    if system is None:
        raise ConfigError("checkpoint has no system description")
    eps = args.eps if args.eps is not None else meta.get("epsilon_final")
    if eps is None:
        raise ConfigError("--eps is required (checkpoint does not record one)")
    if args.delta > max_delta(eps):
        raise ConfigError(f"delta must be <= {max_delta(eps):.4g} for eps={eps}")
    out = verify_lyapunov(net, ctrl, system, eps, args.delta,
                          Budget(args.max_boxes, args.max_seconds), args.workers,
                          relaxation=args.relaxation)
    if isinstance(out, Unsat):
        print(f"unsat: Lyapunov conditions hold for ||x||^2 >= {eps} "
              f"({out.boxes} boxes, {out.elapsed:.2f} s)")
        return EXIT_OK
    print(f"delta-sat: witness {out.witness.tolist()} violates {out.violated}")
    return EXIT_DELTA_SAT


def cmd_roa(args) -> int:
    net, ctrl, system, meta = _load(args.checkpoint)
    if system is None:
        raise ConfigError("checkpoint has no system description")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    budget = Budget(args.max_boxes, args.max_seconds)
    V = compile_V(net)
    cert = roa.certified_level(V, system.n, system.radius, budget=budget)
    vol = roa.region_volume(net, cert.beta, system, args.n_mc, args.seed)
    print(f"learned: beta = {cert.beta:.6g} (sampled boundary min {cert.sampled_beta:.6g}), "
          f"volume = {vol.volume:.4g} +- {vol.stderr:.2g}")

    eps = args.eps if args.eps is not None else meta.get("epsilon_final") or 0.01
    _, sol = lqr_controller(system)
    base = roa.lqr_baseline(system, sol.P, sol.K, eps, min(args.delta, max_delta(eps)), budget)
    P = sol.P
    bvol = roa.region_volume(lambda X: np.einsum("ij,jk,ik->i", X, P, X), base.beta,
                             system, args.n_mc, args.seed)
    print(f"lqr baseline: verified radius {base.radius:.4g}, beta = {base.beta:.6g}, "
          f"volume = {bvol.volume:.4g} +- {bvol.stderr:.2g}")
    ratio = vol.volume / bvol.volume if bvol.volume > 0 else float("inf")
    print(f"ratio learned/lqr = {ratio:.3f}")
    try:
        for reg in bench.reference_regions(system.name):
            print(f"reference {reg.label} ellipse {reg.diameters}: area {reg.area:.4f}")
    except bench.NoReferenceData:
        pass

    roa.write_roa_grid(out / "roa_grid.csv", net, system.domain_box(), cert.beta, args.grid_n)
    x0 = _inside_samples(net, cert.beta, system, args.n_traj, args.seed)
    traj = roa.simulate(system, ctrl, x0, args.dt, args.T,
                        region=lambda X: net(X) <= cert.beta)
    roa.write_trajectories(out / "trajectories.csv", traj)
    print(f"trajectories: {int(np.sum(traj.exited))} of {len(x0)} left the certified region")
    (out / "roa_report.json").write_text(json.dumps({
        "beta": cert.beta, "sampled_beta": cert.sampled_beta, "volume": vol.volume,
        "volume_stderr": vol.stderr, "lqr_radius": base.radius, "lqr_beta": base.beta,
        "lqr_volume": bvol.volume, "ratio": ratio}, indent=2))
    return EXIT_OK


def _inside_samples(V, beta, system, count, seed):
    from .training import sample_states

    rng = np.random.default_rng(seed)
    X = sample_states(max(20 * count, 2000), system, seed=int(rng.integers(2 ** 31))).points
    X = X[np.asarray(V(X)) <= beta]
    return X[:count]


def cmd_simulate(args) -> int:
    net, ctrl, system, _ = _load(args.checkpoint)
    if system is None:
        raise ConfigError("checkpoint has no system description")
    x0 = np.array([_floats(s) for s in args.x0])
    if x0.shape[1] != system.n:
        raise ConfigError(f"initial states need {system.n} coordinates")
    traj = roa.simulate(system, ctrl, x0, args.dt, args.T)
    roa.write_trajectories(args.out, traj)
    for i, x in enumerate(traj.final):
        print(f"trajectory {i}: final state {np.round(x, 6).tolist()}"
              f"{' (converged)' if traj.converged[i] else ''}")
    return EXIT_OK


def cmd_bench_list(args) -> int:
    for b in bench.list_benchmarks():
        print(f"{b.name:16s} radius {b.radius:<5g} target eps {b.target_epsilon:<6g} "
              f"{b.description}")
    return EXIT_OK


# --------------------------------------------------------------------- parser

def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lyapcert", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthesize", help="learn and certify a Lyapunov function and controller")
    s.add_argument("--bench")
    s.add_argument("--dynamics", help="custom system file (see bench.load_system_file)")
    s.add_argument("--config", help="JSON run configuration")
    s.add_argument("--param", action="append", help="benchmark constant, key=value")
    s.add_argument("--radius", type=float)
    s.add_argument("--hidden", type=lambda t: tuple(int(float(v)) for v in _floats(t)))
    s.add_argument("--lr", type=float)
    s.add_argument("--optimizer", choices=("sgd", "adam"))
    s.add_argument("--n-samples", dest="n_samples", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--eps", help="epsilon schedule, e.g. '0.25,0.04'")
    s.add_argument("--delta", type=float)
    s.add_argument("--alpha", type=float, help="ROA regulator weight")
    s.add_argument("--Q")
    s.add_argument("--R")
    s.add_argument("--max-cegis", dest="max_cegis", type=int)
    s.add_argument("--max-seconds", dest="max_seconds", type=float)
    s.add_argument("--learner-max-iters", dest="learner_max_iters", type=int)
    s.add_argument("--falsifier-max-boxes", dest="falsifier_max_boxes", type=int)
    s.add_argument("--falsifier-max-seconds", dest="falsifier_max_seconds", type=float)
    s.add_argument("--from-scratch", action="store_true")
    s.add_argument("--workers", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_synthesize)

    def budget_flags(q):
        q.add_argument("--max-boxes", type=int, default=10 ** 7)
        q.add_argument("--max-seconds", type=float, default=1800.0)
        q.add_argument("--workers", type=int, default=1)

    v = sub.add_parser("verify", help="check a checkpoint with the falsifier")
    v.add_argument("checkpoint")
    v.add_argument("--eps", type=float)
    v.add_argument("--delta", type=float, default=0.01)
    v.add_argument("--relaxation", type=float, default=0.0)
    budget_flags(v)
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("roa", help="certify the region of attraction and compare with LQR")
    r.add_argument("checkpoint")
    r.add_argument("--out", default="roa_out")
    r.add_argument("--grid-n", type=int, default=101)
    r.add_argument("--n-mc", type=int, default=100000)
    r.add_argument("--n-traj", type=int, default=100)
    r.add_argument("--dt", type=float, default=0.01)
    r.add_argument("--T", type=float, default=10.0)
    r.add_argument("--eps", type=float)
    r.add_argument("--delta", type=float, default=0.01)
    r.add_argument("--seed", type=int, default=0)
    budget_flags(r)
    r.set_defaults(func=cmd_roa)

    m = sub.add_parser("simulate", help="RK4 closed-loop trajectories from a checkpoint")
    m.add_argument("checkpoint")
    m.add_argument("--x0", action="append", required=True, help="initial state, e.g. '1.0,0.5'")
    m.add_argument("--dt", type=float, default=0.01)
    m.add_argument("--T", type=float, default=10.0)
    m.add_argument("--out", default="trajectory.csv")
    m.set_defaults(func=cmd_simulate)

    b = sub.add_parser("bench-list", help="list built-in benchmarks")
    b.set_defaults(func=cmd_bench_list)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ProblemError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except BudgetExhausted as err:
        print(f"falsifier budget exhausted: {err}", file=sys.stderr)
        return EXIT_BUDGET
    except roa.CannotCertify as err:
        print(f"cannot certify ROA: {err}", file=sys.stderr)
        return EXIT_ROA


if __name__ == "__main__":
    sys.exit(main())
