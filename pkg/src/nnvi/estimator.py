"""scikit-learn style front end.

``VISolver`` fits a surrogate to a :class:`~nnvi.problems.VIProblem` and
predicts ``f(t, x)`` on rows ``[t, x_1, ..., x_d]``.
``PrimalValueEstimator`` fits the dual surrogate of an investment-and-
stopping problem and predicts primal values on rows ``[t, x]``.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin, clone
from sklearn.utils.validation import check_array, check_is_fitted

from .dual import PrimalRecovery, recover
from .exceptions import ContractError
from .loss import LossWeights, SamplingPlan, total_loss
from .problems import DualProblemSpec, VIProblem, apply_operator, build_dual_investment_problem
from .surrogate import SurrogateConfig, SurrogateModel
from .train import TrainConfig, train


class VISolver(RegressorMixin, BaseEstimator):
    """Neural surrogate of a parabolic variational inequality.

    Parameters mirror :class:`SurrogateConfig`, :class:`SamplingPlan`,
    :class:`LossWeights` and :class:`TrainConfig`; ``random_state`` seeds
    both initialisation and sampling.

    Attributes
    ----------
    model_ : SurrogateModel
    report_ : TrainReport
    problem_ : VIProblem
    n_features_in_ : int
        ``1 + d``.
    """

    def __init__(self, hidden_layers=(64, 64, 64), activation="tanh", dtype="float64",
                 steps=20_000, optimizer="adam", learning_rate=1e-3, final_learning_rate=1e-5,
                 schedule="cosine", n_interior=1024, n_initial=256, n_lateral=256,
                 n_time_pairs=256, n_space_pairs=256, sampling_measure="uniform",
                 boundary_measure="surface", resample_each_step=True, weights=(1.0, 1.0, 1.0, 1.0),
                 checkpoint_every=500, eval_scale=4.0, lbfgs_steps=200, lbfgs_rounds=1, early_stop=None,
                 random_state=0):
        self.hidden_layers = hidden_layers
        self.activation = activation
        self.dtype = dtype
        self.steps = steps
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.final_learning_rate = final_learning_rate
        self.schedule = schedule
        self.n_interior = n_interior
        self.n_initial = n_initial
        self.n_lateral = n_lateral
        self.n_time_pairs = n_time_pairs
        self.n_space_pairs = n_space_pairs
        self.sampling_measure = sampling_measure
        self.boundary_measure = boundary_measure
        self.resample_each_step = resample_each_step
        self.weights = weights
        self.checkpoint_every = checkpoint_every
        self.eval_scale = eval_scale
        self.lbfgs_steps = lbfgs_steps
        self.lbfgs_rounds = lbfgs_rounds
        self.early_stop = early_stop
        self.random_state = random_state

    @classmethod
    def from_configs(cls, s_cfg: SurrogateConfig, t_cfg: TrainConfig, seed=None) -> "VISolver":
        p, w = t_cfg.plan, t_cfg.weights
        return cls(hidden_layers=s_cfg.hidden_layers, activation=s_cfg.activation, dtype=s_cfg.dtype,
                   steps=t_cfg.steps, optimizer=t_cfg.optimizer, learning_rate=t_cfg.learning_rate,
                   final_learning_rate=t_cfg.final_learning_rate, schedule=t_cfg.schedule,
                   n_interior=p.n_interior, n_initial=p.n_initial, n_lateral=p.n_lateral,
                   n_time_pairs=p.n_time_pairs, n_space_pairs=p.n_space_pairs,
                   sampling_measure=p.measure, boundary_measure=p.boundary_measure,
                   resample_each_step=p.resample_each_step, weights=w.as_tuple(),
                   checkpoint_every=t_cfg.checkpoint_every, eval_scale=t_cfg.eval_scale,
                   lbfgs_steps=t_cfg.lbfgs_steps, lbfgs_rounds=t_cfg.lbfgs_rounds, early_stop=t_cfg.early_stop,
                   random_state=t_cfg.seeds[0] if seed is None else seed)

    def surrogate_config(self, dim: int) -> SurrogateConfig:
        return SurrogateConfig(1 + dim, tuple(self.hidden_layers), self.activation, 0, self.dtype)

    def train_config(self) -> TrainConfig:
        plan = SamplingPlan(self.n_interior, self.n_initial, self.n_lateral, self.n_time_pairs,
                            self.n_space_pairs, measure=self.sampling_measure,
                            resample_each_step=self.resample_each_step,
                            boundary_measure=self.boundary_measure)
        return TrainConfig(steps=self.steps, optimizer=self.optimizer, learning_rate=self.learning_rate,
                           final_learning_rate=self.final_learning_rate, schedule=self.schedule,
                           plan=plan, weights=LossWeights(*self.weights),
                           checkpoint_every=self.checkpoint_every, seeds=(int(self.random_state),),
                           early_stop=self.early_stop, eval_scale=self.eval_scale,
                           lbfgs_steps=self.lbfgs_steps, lbfgs_rounds=self.lbfgs_rounds)

    def fit(self, problem: VIProblem, y=None):
        """Train on ``problem``; ``y`` is ignored."""
        if not isinstance(problem, VIProblem):
            raise ContractError("VISolver.fit expects a VIProblem")
        self.model_, self.report_ = train(problem, self.surrogate_config(problem.dim),
                                          self.train_config())
        self.problem_ = problem
        self.n_features_in_ = 1 + problem.dim
        return self

    def _check_X(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ContractError(f"X has {X.shape[1]} columns, expected {self.n_features_in_}")
        return X

    def predict(self, X):
        """Surrogate values ``f(t, x)`` at rows ``[t, x...]``."""
        X = self._check_X(X)
        with torch.no_grad():
            return self.model_(X).double().numpy()

    def jet(self, X, hessian="full"):
        return self.model_.jet(self._check_X(X), hessian=hessian)

    def residual(self, X):
        """Pointwise ``min{G[f], f - g}``."""
        X = self._check_X(X)
        j = self.model_.jet(X, hessian="full")
        with torch.no_grad():
            G = apply_operator(self.problem_.operator, j)
            g = self.problem_.obstacle(j.points[:, 0], j.points[:, 1:])
            return torch.minimum(G, j.value - g).detach().double().numpy()

    def loss(self, rng=None):
        check_is_fitted(self, "model_")
        cfg = self.train_config()
        with torch.no_grad():
            return total_loss(self.model_, self.problem_, cfg.plan, cfg.weights,
                              rng=np.random.default_rng(rng))


class PrimalValueEstimator(RegressorMixin, BaseEstimator):
    """Primal value of the investment-and-stopping problem via its dual surrogate.

    Parameters
    ----------
    solver : VISolver, optional
        Template solver; cloned on :meth:`fit`.
    method : {"bisection", "grid"}
    n_points : int
        Grid size for ``method="grid"`` and the bisection fallback.
    y_bracket : tuple, optional
    """

    def __init__(self, solver=None, method="bisection", n_points=200, y_bracket=None,
                 tol_bisect=1e-10):
        self.solver = solver
        self.method = method
        self.n_points = n_points
        self.y_bracket = y_bracket
        self.tol_bisect = tol_bisect

    def _recovery(self) -> PrimalRecovery:
        return PrimalRecovery(self.method, self.n_points, self.y_bracket, self.tol_bisect)

    def fit(self, spec: DualProblemSpec, y=None):
        if not isinstance(spec, DualProblemSpec):
            raise ContractError("PrimalValueEstimator.fit expects a DualProblemSpec")
        solver = VISolver() if self.solver is None else clone(self.solver)
        self.solver_ = solver.fit(build_dual_investment_problem(spec))
        self.spec_ = spec
        self.n_features_in_ = 2
        return self

    @classmethod
    def from_fitted(cls, model: SurrogateModel, spec: DualProblemSpec, **kw) -> "PrimalValueEstimator":
        """Wrap an already trained dual surrogate."""
        est = cls(**kw)
        solver = VISolver(hidden_layers=model.config.hidden_layers,
                          activation=model.config.activation, dtype=model.config.dtype)
        solver.model_ = model
        solver.problem_ = build_dual_investment_problem(spec)
        solver.n_features_in_ = 2
        est.solver_, est.spec_, est.n_features_in_ = solver, spec, 2
        return est

    def recover(self, t: float, x) -> dict:
        check_is_fitted(self, "solver_")
        return recover(self.solver_.model_, self.spec_, t, x, self._recovery())

    def predict(self, X):
        """Primal values at rows ``[t, x]``."""
        check_is_fitted(self, "solver_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 2:
            raise ContractError("rows must be [t, x]")
        out = np.empty(X.shape[0])
        for t in np.unique(X[:, 0]):
            rows = X[:, 0] == t
            out[rows] = self.recover(float(t), X[rows, 1])["V"]
        return out
