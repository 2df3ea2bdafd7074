"""scikit-learn style wrapper around :func:`lyapcert.cegis.synthesize`."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import bench
from .cegis import SynthesisConfig, synthesize
from .network import SystemSpec, lie_derivative_at
from .training import RiskConfig, TrainingSet, empirical_risk

__all__ = ["LyapunovControlEstimator"]


class LyapunovControlEstimator(BaseEstimator):
    """Learn a certified Lyapunov function and linear controller for one system.

    ``system`` is a benchmark name or a :class:`SystemSpec`.  ``fit(X)``
    accepts optional extra initial states that are added to the random
    training sample.  After fitting:

    * ``predict(X)`` returns the control ``u = K x``
    * ``transform(X)`` returns columns ``[V(x), LieV(x)]``
    * ``score(X)`` is the negated empirical Lyapunov risk on ``X``
    """

    def __init__(self, system="pendulum", hidden=(6,), learning_rate=0.01, optimizer="adam",
                 n_samples=500, epsilon_schedule=None, delta=0.01, roa_alpha=0.0,
                 max_cegis_iterations=100, max_wall_seconds=7200.0, workers=1, seed=0,
                 run_dir=None):
        self.system = system
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.n_samples = n_samples
        self.epsilon_schedule = epsilon_schedule
        self.delta = delta
        self.roa_alpha = roa_alpha
        self.max_cegis_iterations = max_cegis_iterations
        self.max_wall_seconds = max_wall_seconds
        self.workers = workers
        self.seed = seed
        self.run_dir = run_dir

    def _system(self) -> tuple[SystemSpec, float | None]:
        if isinstance(self.system, SystemSpec):
            return self.system, None
        spec = bench.build(self.system)
        return spec, bench.BENCHMARKS[spec.name].target_epsilon

    def _config(self) -> SynthesisConfig:
        sched = None if self.epsilon_schedule is None else tuple(self.epsilon_schedule)
        return SynthesisConfig(
            hidden=tuple(self.hidden), learning_rate=self.learning_rate,
            optimizer=self.optimizer, n_samples=self.n_samples, seed=self.seed,
            epsilon_schedule=sched, delta=self.delta, roa_alpha=self.roa_alpha,
            max_cegis_iterations=self.max_cegis_iterations,
            max_wall_seconds=self.max_wall_seconds, workers=self.workers)

    def _check_X(self, X) -> np.ndarray:
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def fit(self, X=None, y=None):
        system, target = self._system()
        self.n_features_in_ = system.n
        extra = None if X is None else self._check_X(X)
        cfg = self._config()
        report = synthesize(system, cfg, target, run_dir=self.run_dir, initial_states=extra)
        self.system_ = system
        self.report_ = report
        self.net_ = report.net
        self.controller_ = report.ctrl
        self.certified_ = report.certified
        self.epsilon_final_ = report.epsilon_final
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        return self.controller_(self._check_X(X))

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = self._check_X(X)
        V = self.net_(X)
        L = lie_derivative_at(self.net_, self.system_, self.controller_, X)
        return np.column_stack([V, L])

    def score(self, X, y=None) -> float:
        check_is_fitted(self, "net_")
        X = self._check_X(X)
        cfg = RiskConfig(self.roa_alpha, self.roa_alpha > 0, self.learning_rate, self.optimizer)
        return -empirical_risk(self.net_, self.controller_, self.system_, TrainingSet(X), cfg)
