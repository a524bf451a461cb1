"""Estimator-style facade: configure, fit on self-generated paths, predict."""

from __future__ import annotations

import inspect

import numpy as np

from .experiments import ExperimentConfig, build_plan
from .metrics import field_columns
from .trainer import Trainer


class FbsnnSolver:
    """Train one benchmark problem and evaluate its fields.

    Follows the familiar estimator protocol: every constructor argument is
    stored verbatim and reported by get_params / set_params, fit() builds and
    trains the networks (the training data is simulated internally, so X and y
    are ignored), and predict(TX) evaluates the trained networks at rows
    (t, x_1, ..., x_d), returning every output head in the column order given
    by `columns_`.
    """

    def __init__(self, experiment="tg2d", d=None, gamma=None, nu=None,
                 iterations=None, full_budget=False, dt=None, N=None, K=None,
                 weights=None, curriculum=None, seed=0):
        self.experiment = experiment
        self.d = d
        self.gamma = gamma
        self.nu = nu
        self.iterations = iterations
        self.full_budget = full_budget
        self.dt = dt
        self.N = N
        self.K = K
        self.weights = weights
        self.curriculum = curriculum
        self.seed = seed

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [name for name in sig.parameters if name != "self"]

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(
                    f"unknown parameter {name!r}; valid parameters: "
                    + ", ".join(sorted(valid))
                )
            setattr(self, name, value)
        return self

    def _config(self):
        return ExperimentConfig(
            experiment=self.experiment,
            d=self.d,
            gamma=self.gamma,
            nu=self.nu,
            seeds=(self.seed,),
            full_budget=self.full_budget,
            iterations=self.iterations,
            dt=self.dt,
            N=self.N,
            K=self.K,
            weights=self.weights,
            curriculum=self.curriculum,
        )

    def fit(self, X=None, y=None):
        """Build the configured problem and train it; X and y are ignored."""
        plan = build_plan(self._config())
        networks = plan.networks(int(self.seed))
        trainer = Trainer(
            plan.setup.spec,
            T=plan.setup.T,
            N=plan.N,
            networks=networks,
            schedule=plan.schedule,
            weights=plan.weights,
            aux=plan.aux,
            curriculum=plan.curriculum,
            mass=plan.mass,
            seed=int(self.seed),
        )
        history = trainer.train()
        self.plan_ = plan
        self.networks_ = networks
        self.history_ = history
        self.n_dim_ = plan.setup.spec.d
        self.columns_ = field_columns(networks, self.n_dim_)[1 + self.n_dim_ :]
        return self

    def _check_fitted(self):
        if not hasattr(self, "networks_"):
            raise RuntimeError("this solver is not fitted yet; call fit() first")

    def predict(self, TX):
        """Evaluate all heads at rows (t, x_1..x_d); columns follow columns_."""
        self._check_fitted()
        TX = np.asarray(TX, dtype=float)
        if TX.ndim != 2 or TX.shape[1] != 1 + self.n_dim_:
            raise ValueError(
                f"expected (n, {1 + self.n_dim_}) rows of (t, x), got {TX.shape}"
            )
        t, x = TX[:, :1], TX[:, 1:]
        blocks = [self.networks_[name].predict(t, x) for name in sorted(self.networks_)]
        return np.concatenate(blocks, axis=1)
