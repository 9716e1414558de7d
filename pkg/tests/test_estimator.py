import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from nnvi.estimator import PrimalValueEstimator, VISolver
from nnvi.exceptions import ContractError
from nnvi.problems import build_dual_investment_problem

TINY = dict(hidden_layers=(8,), steps=5, n_interior=32, n_initial=16, n_lateral=8, n_time_pairs=8,
            n_space_pairs=8, checkpoint_every=5)


def test_params_round_trip():
    est = VISolver(**TINY, random_state=3)
    params = est.get_params()
    assert params["steps"] == 5 and params["random_state"] == 3
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(steps=7)
    assert est.train_config().steps == 7


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        VISolver().predict(np.zeros((1, 2)))
    with pytest.raises(NotFittedError):
        PrimalValueEstimator().predict(np.zeros((1, 2)))


def test_fit_predict(power_spec):
    problem = build_dual_investment_problem(power_spec)
    est = VISolver(**TINY).fit(problem)
    X = np.array([[0.0, 0.0], [problem.horizon, 1.0]])
    y = est.predict(X)
    assert y.shape == (2,) and np.all(np.isfinite(y))
    assert est.residual(X).shape == (2,)
    assert est.loss(rng=0).total.item() >= 0
    assert est.report_.steps_executed == 5
    with pytest.raises(ContractError):
        est.predict(np.zeros((2, 3)))
    with pytest.raises(ContractError):
        est.fit(power_spec)


def test_fit_is_reproducible(power_spec):
    problem = build_dual_investment_problem(power_spec)
    X = np.array([[0.001, 0.3]])
    a = VISolver(**TINY, random_state=1).fit(problem).predict(X)
    b = VISolver(**TINY, random_state=1).fit(problem).predict(X)
    assert np.array_equal(a, b)


def test_primal_estimator(power_spec):
    est = PrimalValueEstimator(VISolver(**TINY), method="grid", n_points=50).fit(power_spec)
    X = np.array([[0.0, 1.2], [1.0, 1.5], [0.0, 1.5]])
    V = est.predict(X)
    assert V.shape == (3,)
    assert V[0] == est.recover(0.0, [1.2])["V"][0]
    with pytest.raises(ContractError):
        est.predict(np.zeros((1, 3)))


def test_from_fitted(power_spec):
    solver = VISolver(**TINY).fit(build_dual_investment_problem(power_spec))
    wrapped = PrimalValueEstimator.from_fitted(solver.model_, power_spec, method="grid", n_points=40)
    fresh = PrimalValueEstimator(VISolver(**TINY), method="grid", n_points=40).fit(power_spec)
    X = np.array([[0.5, 1.3]])
    assert np.allclose(wrapped.predict(X), fresh.predict(X))
