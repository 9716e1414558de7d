import csv
import math

import numpy as np
import pytest
import torch

from nnvi.dual import (RECOVERY_COLUMNS, PrimalRecovery, dual_value, primal_bisection, primal_grid, recover,
                       write_recovery_csv)
from nnvi.exceptions import ExtrapolationError, ParameterError
from nnvi.surrogate import Jet, SurrogateConfig


class ObstacleModel:
    """f(tau, z) = exp(-z) - exp(z), the transformed power obstacle with K = 1."""

    config = SurrogateConfig(2)

    def __call__(self, X):
        z = torch.as_tensor(X, dtype=torch.float64)[:, 1]
        return torch.exp(-z) - torch.exp(z)

    def jet(self, X, hessian=False, directions=None):
        X = torch.as_tensor(X, dtype=torch.float64)
        z = X[:, 1]
        n = X.shape[0]
        grad = (-torch.exp(-z) - torch.exp(z)).reshape(n, 1)
        return Jet(X, self(X), torch.zeros(n, dtype=X.dtype), grad, hessian=None)


class BumpyModel(ObstacleModel):
    """Non-convex in y: derivative changes sign several times."""

    def __call__(self, X):
        z = torch.as_tensor(X, dtype=torch.float64)[:, 1]
        return super().__call__(X) + 0.5 * torch.sin(12 * z)

    def jet(self, X, hessian=False, directions=None):
        j = super().jet(X)
        z = j.points[:, 1]
        return Jet(j.points, self(X), j.dt, j.grad + 6 * torch.cos(12 * z).reshape(-1, 1), hessian=None)


XS = np.round(np.arange(1.1, 2.01, 0.1), 10)


@pytest.mark.parametrize("method", ["bisection", "grid"])
def test_maturity_recovers_utility(power_spec, method):
    rec = PrimalRecovery(method, n_points=4000)
    r = recover(ObstacleModel(), power_spec, power_spec.T, XS, rec)
    exact = 2 * np.sqrt(XS - 1)
    tol = 1e-10 if method == "bisection" else 1e-5
    assert np.allclose(r["V"], exact, atol=tol)
    assert np.allclose(r["y_star"], 1 / np.sqrt(XS - 1), rtol=1e-2 if method == "grid" else 1e-8)
    assert not r["fallback"].any()


def test_bisection_and_grid_agree(power_spec):
    b = primal_bisection(ObstacleModel(), power_spec, 0.5, XS)
    g = primal_grid(ObstacleModel(), power_spec, 0.5, XS, PrimalRecovery("grid", n_points=2000))
    assert np.all(g["V"] >= b["V"] - 1e-12)
    assert np.max(np.abs(g["V"] / b["V"] - 1)) < 1e-3


def test_dual_value_derivative(power_spec):
    y = np.array([0.8, 1.0, 2.0])
    w, dw = dual_value(ObstacleModel(), power_spec, 0.3, y, derivative=True)
    assert np.allclose(w, 1 / y - y)
    assert np.allclose(dw, -1 / y ** 2 - 1)
    assert isinstance(dual_value(ObstacleModel(), power_spec, 0.3, 1.0), float)


def test_out_of_box_is_refused(power_spec):
    with pytest.raises(ExtrapolationError):
        dual_value(ObstacleModel(), power_spec, 0.0, math.exp(power_spec.z_hi + 0.1))
    with pytest.raises(ExtrapolationError):
        dual_value(ObstacleModel(), power_spec, power_spec.T + 0.1, 1.0)
    with pytest.raises(ExtrapolationError):
        dual_value(ObstacleModel(), power_spec, 0.0, -1.0)
    with pytest.raises(ExtrapolationError):
        recover(ObstacleModel(), power_spec, 0.0, XS, PrimalRecovery(y_bracket=(100.0, 200.0)))


def test_no_root_in_bracket_falls_back(power_spec):
    # y* = 1 / sqrt(x - 1) = 31.6 lies beyond exp(z_hi)
    r = primal_bisection(ObstacleModel(), power_spec, power_spec.T, [1.001, 1.5])
    assert r["fallback"].tolist() == [True, False]
    assert r["y_star"][0] == pytest.approx(math.exp(power_spec.z_hi))


def test_non_convex_surrogate_falls_back(power_spec):
    r = primal_bisection(BumpyModel(), power_spec, 0.0, XS)
    assert r["fallback"].any()
    g = primal_grid(BumpyModel(), power_spec, 0.0, XS[r["fallback"]])
    assert np.allclose(r["V"][r["fallback"]], g["V"])


def test_recovery_csv(tmp_path, power_spec):
    r = recover(ObstacleModel(), power_spec, 1.0, XS)
    path = write_recovery_csv(tmp_path / "rec.csv", 1.0, XS, r)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == RECOVERY_COLUMNS
    assert len(rows) == 1 + XS.size
    assert rows[1][2] == "bisection" and rows[1][5] == "0"
    assert float(rows[3][4]) == r["V"][2]


def test_recovery_validation():
    with pytest.raises(ParameterError):
        PrimalRecovery("newton")
    with pytest.raises(ParameterError):
        PrimalRecovery(n_points=0)
    with pytest.raises(ParameterError):
        PrimalRecovery(y_bracket=(2.0, 1.0))
