"""The counterexample-guided synthesis loop.

LQR initialization, then alternate: learn on the current sample set, run the
falsifier, and either append the witness or move down the epsilon schedule.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lqr
from .falsifier import Budget, BudgetExhausted, DeltaSat, Unsat, max_delta, verify_lyapunov, write_counterexample_log
from .network import (LinearController, LyapunovNet, SystemSpec, lie_derivative_at,
                      save_checkpoint)
from .training import (NonFiniteRisk, RiskConfig, StopCriteria, learn,
                       sample_states, write_training_log)

__all__ = [
    "SynthesisConfig", "SynthesisReport", "synthesize", "relax_and_retry",
    "LqrInitFailed", "CERTIFIED", "EXHAUSTED", "LEARNER_STUCK",
]

log = logging.getLogger(__name__)

CERTIFIED = "Certified"
EXHAUSTED = "Exhausted"
LEARNER_STUCK = "LearnerStuck"


class LqrInitFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthesisConfig:
    hidden: tuple = (6,)
    output_tanh: bool = False
    learning_rate: float = 0.01
    optimizer: str = "adam"
    n_samples: int = 500
    seed: int = 0
    epsilon_schedule: tuple | None = None
    delta: float = 0.01
    roa_alpha: float = 0.0
    Q: tuple | None = None
    R: tuple | None = None
    max_cegis_iterations: int = 100
    max_wall_seconds: float = 7200.0
    learner_max_iters: int = 2000
    learner_patience: int = 10
    risk_threshold: float = 0.0
    falsifier_max_boxes: int = 5 * 10 ** 6
    falsifier_max_seconds: float = 600.0
    workers: int = 1
    from_scratch: bool = False
    rescale_on_spurious: bool = True
    stuck_patience: int = 10

    def schedule(self, target: float | None) -> tuple:
        if self.epsilon_schedule is not None:
            return tuple(float(e) for e in self.epsilon_schedule)
        if target is None:
            raise ValueError("no epsilon schedule and no target epsilon")
        return (0.25, float(target)) if target < 0.25 else (float(target),)

    def validate(self, target: float | None = None) -> None:
        sched = self.schedule(target)
        if any(not e > 0 for e in sched):
            raise ValueError("epsilon values must be positive")
        if list(sched) != sorted(sched, reverse=True):
            raise ValueError("epsilon schedule must be non-increasing")
        for e in sched:
            if not 0 < self.delta <= max_delta(e):
                raise ValueError(f"delta={self.delta} too large for epsilon={e} "
                                 f"(need delta <= {max_delta(e):.4g})")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.max_cegis_iterations < 0:
            raise ValueError("max_cegis_iterations must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        RiskConfig(self.roa_alpha, self.roa_alpha > 0, self.learning_rate, self.optimizer)

    def budget(self) -> Budget:
        return Budget(self.falsifier_max_boxes, self.falsifier_max_seconds)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("hidden", "epsilon_schedule", "Q", "R"):
            if d[k] is not None:
                d[k] = np.asarray(d[k]).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthesisConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("hidden", "epsilon_schedule"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        for k in ("Q", "R"):
            if d.get(k) is not None:
                d[k] = tuple(map(tuple, np.atleast_2d(d[k]).tolist()))
        return cls(**d)


@dataclass
class SynthesisReport:
    outcome: str
    net: LyapunovNet
    ctrl: LinearController
    system: SystemSpec
    epsilon_final: float | None
    delta: float
    epsilon_schedule: tuple
    learning_time_s: float = 0.0
    falsification_time_s: float = 0.0
    n_samples: int = 0
    n_cegis_iterations: int = 0
    n_learner_iterations: int = 0
    relaxation: float = 0.0
    message: str = ""
    lqr_K: np.ndarray | None = None
    counterexamples: list = field(default_factory=list)
    training_log: list = field(default_factory=list)
    run_dir: Path | None = None

    @property
    def certified(self) -> bool:
        return self.outcome == CERTIFIED

    @property
    def relaxed(self) -> bool:
        return self.relaxation != 0.0

    def summary(self) -> dict:
        return {
            "outcome": self.outcome,
            "system": self.system.name,
            "epsilon_final": self.epsilon_final,
            "delta": self.delta,
            "epsilon_schedule": list(self.epsilon_schedule),
            "relaxed": self.relaxed,
            "relaxation": self.relaxation,
            "learning_time_s": round(self.learning_time_s, 3),
            "falsification_time_s": round(self.falsification_time_s, 3),
            "n_samples": self.n_samples,
            "n_cegis_iterations": self.n_cegis_iterations,
            "n_learner_iterations": self.n_learner_iterations,
            "controller_gain": np.asarray(self.ctrl.K).tolist(),
            "message": self.message,
        }

    def to_text(self) -> str:
        return "".join(f"{k}: {json.dumps(v)}\n" for k, v in self.summary().items())

    def write(self, run_dir) -> Path:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(run_dir / "final_checkpoint.json", self.net, self.ctrl, self.system,
                        outcome=self.outcome, epsilon_final=self.epsilon_final,
                        delta=self.delta, relaxation=self.relaxation)
        write_training_log(run_dir / "training_log.csv", self.training_log)
        write_counterexample_log(run_dir / "counterexamples.csv", self.counterexamples)
        (run_dir / "report.txt").write_text(self.to_text())
        self.run_dir = run_dir
        return run_dir


def _initial_pair(system: SystemSpec, cfg: SynthesisConfig):
    try:
        ctrl, sol = lqr.lqr_controller(system, cfg.Q, cfg.R)
    except (lqr.OriginSingularity, lqr.NonEquilibrium, lqr.NotStabilizable,
            lqr.IllConditioned, ValueError, np.linalg.LinAlgError) as err:
        raise LqrInitFailed(f"{type(err).__name__}: {err}") from err
    net = LyapunovNet.random(system.n, cfg.hidden, seed=cfg.seed, output_tanh=cfg.output_tanh)
    return net, ctrl, sol


def _double_output(net: LyapunovNet) -> LyapunovNet:
    # V -> 2V keeps both Lyapunov conditions and moves V away from the
    # delta band that made the last witness spurious
    layers = list(net.layers)
    W, b = layers[-1]
    layers[-1] = (2.0 * W, 2.0 * b)
    return LyapunovNet(layers, net.output_tanh)


def synthesize(system: SystemSpec, config: SynthesisConfig = SynthesisConfig(),
               target_epsilon: float | None = None, run_dir=None,
               initial_states=None) -> SynthesisReport:
    """Run the synthesis loop on ``system``.

    ``target_epsilon`` is only used when ``config.epsilon_schedule`` is None.
    With ``run_dir`` set, the config, one checkpoint per iteration, the CSV
    logs and the final report are written there.  ``initial_states`` are
    appended to the random initial sample.
    """
    cfg = config
    cfg.validate(target_epsilon)
    schedule = cfg.schedule(target_epsilon)
    net0, ctrl, sol = _initial_pair(system, cfg)
    net = net0
    risk_cfg = RiskConfig(cfg.roa_alpha, cfg.roa_alpha > 0, cfg.learning_rate, cfg.optimizer)
    stop = StopCriteria(cfg.risk_threshold, cfg.learner_patience, cfg.learner_max_iters)
    ts = sample_states(cfg.n_samples, system, seed=cfg.seed)
    if initial_states is not None:
        ts.add(np.asarray(initial_states, dtype=float).reshape(-1, system.n), tag="user")

    ckpt_dir = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(
            {"system": system.to_dict(), "config": cfg.to_dict(),
             "epsilon_schedule": list(schedule)}, indent=2))

    report = SynthesisReport(EXHAUSTED, net, ctrl, system, None, cfg.delta, schedule,
                             lqr_K=sol.K)
    t_start = time.perf_counter()
    stage = 0
    last_witness, repeats = None, 0

    def finish(outcome, message=""):
        report.outcome = outcome
        report.message = message
        report.net, report.ctrl = net, ctrl
        report.n_samples = len(ts)
        if run_dir is not None:
            report.write(run_dir)
        log.info("synthesis finished: %s %s", outcome, message)
        return report

    for it in range(cfg.max_cegis_iterations):
        if time.perf_counter() - t_start > cfg.max_wall_seconds:
            return finish(EXHAUSTED, "wall-clock cap reached")
        report.n_cegis_iterations = it + 1
        start = net0 if cfg.from_scratch else net
        try:
            res = learn(start, ctrl, system, ts, risk_cfg, stop, report.training_log,
                        report.n_learner_iterations)
        except NonFiniteRisk as err:
            return finish(LEARNER_STUCK, f"non-finite risk: {err}")
        net, ctrl = res.net, res.ctrl
        report.learning_time_s += res.wall_time
        report.n_learner_iterations += res.iterations + 1
        if ckpt_dir is not None:
            save_checkpoint(ckpt_dir / f"iter_{it:03d}.json", net, ctrl, system,
                            cegis_iteration=it, risk=res.risk)

        t0 = time.perf_counter()
        try:
            while stage < len(schedule):
                out = verify_lyapunov(net, ctrl, system, schedule[stage], cfg.delta,
                                      cfg.budget(), cfg.workers)
                if not isinstance(out, Unsat):
                    break
                report.epsilon_final = schedule[stage]
                stage += 1
        except BudgetExhausted as err:
            # the caller decides whether to raise the budget or relax; the
            # partial report rides along on the exception
            err.report = finish(EXHAUSTED, f"falsifier budget exhausted: {err}")
            raise
        finally:
            report.falsification_time_s += time.perf_counter() - t0
        log.info("iteration %d: risk %.3g, stage %d/%d", it, res.risk, stage, len(schedule))
        if stage == len(schedule):
            return finish(CERTIFIED)

        assert isinstance(out, DeltaSat)
        w = out.witness
        report.counterexamples.append((it, w, out.violated))
        ts.add(w)
        if last_witness is not None and np.array_equal(w, last_witness):
            repeats += 1
            if repeats >= cfg.stuck_patience:
                return finish(LEARNER_STUCK, f"witness {w.tolist()} repeated {repeats + 1} times")
        else:
            last_witness, repeats = w, 0
        spurious = not (float(net(w)) <= 0.0
                        or float(lie_derivative_at(net, system, ctrl, w)) >= 0.0)
        if spurious and cfg.rescale_on_spurious and not net.output_tanh:
            net = _double_output(net)
    return finish(EXHAUSTED, "CEGIS iteration cap reached")


def relax_and_retry(report: SynthesisReport, relaxation: float,
                    budget: Budget = Budget(max_seconds=600), workers: int = 1,
                    epsilon: float | None = None) -> SynthesisReport:
    """Re-verify the report's candidate with ``LieV >= relaxation`` as the violation.

    A positive ``relaxation`` tolerates small positive Lie derivatives, so the
    resulting certificate is tagged relaxed.  Nothing is retrained.
    """
    if relaxation < 0:
        raise ValueError("relaxation must be non-negative")
    eps = epsilon if epsilon is not None else report.epsilon_schedule[-1]
    t0 = time.perf_counter()
    out = verify_lyapunov(report.net, report.ctrl, report.system, eps, report.delta,
                          budget, workers, relaxation=relaxation)
    new = dataclasses.replace(report, relaxation=float(relaxation),
                              counterexamples=list(report.counterexamples),
                              training_log=list(report.training_log), run_dir=None)
    new.falsification_time_s += time.perf_counter() - t0
    if isinstance(out, Unsat):
        new.outcome, new.epsilon_final = CERTIFIED, eps
        new.message = f"certified with LieV relaxed to < {relaxation}" if relaxation else ""
    else:
        new.outcome = report.outcome if report.outcome != CERTIFIED else EXHAUSTED
        new.message = f"relaxed check still DeltaSat at {out.witness.tolist()}"
        new.counterexamples.append((report.n_cegis_iterations, out.witness, out.violated))
    return new
