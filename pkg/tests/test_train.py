import csv

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from nnvi.exceptions import ContractError, DivergenceError, DomainError, ParameterError
from nnvi.loss import SamplingPlan
from nnvi.problems import ParabolicOperator, VIProblem
from nnvi.surrogate import SurrogateConfig, SurrogateModel
from nnvi.train import LOG_COLUMNS, GridSpec, TrainConfig, evaluate_h01_error, train, write_training_log


def heat_problem():
    op = ParabolicOperator.constant([[0.5]], [0.0], 0.1)
    g = lambda t, x: torch.clamp(0.5 - x[:, 0], min=0.0)
    return VIProblem(op, g, [0.0], [1.0], 0.5)


SMALL = SurrogateConfig(2, (16, 16))
PLAN = SamplingPlan(64, 32, 16, 16, 16)


def cfg(**kw):
    base = dict(steps=60, learning_rate=3e-3, plan=PLAN, checkpoint_every=20)
    base.update(kw)
    return TrainConfig(**base)


def test_short_training_reduces_loss():
    model, rep = train(heat_problem(), SMALL, cfg(steps=150))
    first = rep.eval_history[0][1]["total"]
    assert rep.best_eval_loss < 0.5 * first
    assert rep.steps_executed == 150 and rep.wall_clock > 0
    assert np.all(np.diff(rep.best_so_far()) <= 0)
    assert rep.best_step > 0


def test_training_is_deterministic():
    _, r1 = train(heat_problem(), SMALL, cfg(), seed=3)
    _, r2 = train(heat_problem(), SMALL, cfg(), seed=3)
    _, r3 = train(heat_problem(), SMALL, cfg(), seed=4)
    assert r1.history == r2.history
    assert r1.history["total"] != r3.history["total"]


def test_milestones_recorded():
    _, rep = train(heat_problem(), SMALL, cfg(steps=40))
    assert [m["step"] for m in rep.milestones] == [2, 10, 40]
    totals = [m["best_eval_total"] for m in rep.milestones]
    assert totals == sorted(totals, reverse=True)


def test_returned_model_is_best_checkpoint():
    model, rep = train(heat_problem(), SMALL, cfg())
    evals = dict((s, e["total"]) for s, e in rep.eval_history)
    assert rep.best_eval_loss == min(evals.values())


def test_divergence_restores_best_state():
    bad_step = 25

    def poison(step, model, vals):
        if step == bad_step:
            with torch.no_grad():
                next(model.parameters()).fill_(float("nan"))

    with pytest.raises(DivergenceError) as exc:
        train(heat_problem(), SMALL, cfg(), callback=poison)
    err = exc.value
    assert err.step == bad_step + 1
    state = err.last_good_state
    assert all(torch.isfinite(v).all() for v in state.values())


def test_lbfgs_finish_does_not_increase_loss():
    _, adam = train(heat_problem(), SMALL, cfg())
    _, both = train(heat_problem(), SMALL, cfg(optimizer="lbfgs-finish", lbfgs_steps=30))
    assert both.lbfgs_history
    assert both.best_eval_loss <= adam.best_eval_loss


def test_early_stop():
    _, rep = train(heat_problem(), SMALL, cfg(steps=400, early_stop=1e6))
    assert rep.stopped_early and rep.steps_executed == 20


def test_training_log_csv(tmp_path):
    _, rep = train(heat_problem(), SMALL, cfg(steps=5))
    path = write_training_log(rep, tmp_path / "log.csv")
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == LOG_COLUMNS == ("step", "interior", "initial", "lateral_trace",
                                             "lateral_normal", "total")
    assert len(rows) == 6 and rows[-1][0] == "4"
    assert float(rows[1][-1]) == rep.history["total"][0]


def test_checkpoint_written(tmp_path):
    _, rep = train(heat_problem(), SMALL, cfg(steps=5), checkpoint_dir=tmp_path, seed=2)
    assert (tmp_path / rep.checkpoint_id).exists() and rep.checkpoint_id == "model_seed2.npz"


def test_model_dimension_mismatch():
    with pytest.raises(ContractError):
        train(heat_problem(), SMALL, cfg(), model=SurrogateModel(SurrogateConfig(3, (4,))))


def test_learning_rate_schedule():
    c = cfg(steps=101, learning_rate=1e-3, final_learning_rate=1e-5)
    assert c.lr_at(0) == pytest.approx(1e-3) and c.lr_at(100) == pytest.approx(1e-5)
    assert c.lr_at(50) == pytest.approx(0.5 * (1e-3 + 1e-5))
    assert cfg(schedule="constant").lr_at(30) == 3e-3


@pytest.mark.parametrize("kw", [dict(steps=-1), dict(learning_rate=0.0), dict(optimizer="sgd"),
                                dict(schedule="step"), dict(checkpoint_every=0), dict(seeds=()), dict(lbfgs_rounds=0),
                                dict(milestones=(0.0,))])
def test_invalid_train_config(kw):
    with pytest.raises(ParameterError):
        cfg(**kw)


def test_h01_error_exact_reference_is_zero():
    model = SurrogateModel(SMALL)
    grid = GridSpec(np.linspace(0, 0.5, 5), (np.linspace(0, 1, 21),))
    with torch.no_grad():
        own = model(grid.points()).numpy().reshape(grid.shape)
    err = evaluate_h01_error(model, own, grid)
    assert err["l2_error"] == 0 and err["h01_error"] == 0 and err["sup_error"] == 0


def test_h01_error_of_shift_and_tilt():
    model = SurrogateModel(SMALL)
    grid = GridSpec([0.0, 0.25], (np.linspace(0, 1, 11),))

    def shifted(p):
        with torch.no_grad():
            return model(p).numpy() + 0.3 + 2.0 * p[:, 1]

    err = evaluate_h01_error(model, shifted, grid)
    x = grid.points()[:, 1]
    assert err["l2_error"] == pytest.approx(np.sqrt(np.mean((0.3 + 2 * x) ** 2)))
    assert err["h01_gradient_part"] == pytest.approx(2.0)


def test_obstacle_violation_ratio():
    problem = heat_problem()
    model = SurrogateModel(SMALL)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    # model is 0 everywhere; obstacle 0.5 - x is positive for x < 0.5
    grid = GridSpec([0.0], (np.linspace(0, 1, 11),))
    err = evaluate_h01_error(model, np.zeros(grid.shape), grid, problem=problem, tol_feas=1e-9)
    assert err["obstacle_violation_ratio"] == pytest.approx(5 / 11)
    with pytest.raises(DomainError):
        evaluate_h01_error(model, np.zeros((1, 3)), GridSpec([0.0], ([0.0, 1.0, 2.0],)), problem=problem)


class ShiftedObstacle:
    """f = g + c for the heat problem obstacle g = max(0.5 - x, 0)."""

    config = SMALL

    def __init__(self, c):
        self.c = c

    def __call__(self, X):
        X = torch.as_tensor(X, dtype=torch.float64)
        return torch.clamp(0.5 - X[:, 1], min=0.0) + self.c


@given(c=st.floats(-1.0, 1.0), tol=st.floats(1e-6, 1e-2))
def test_feasibility_ratio_property(c, tol):
    grid = GridSpec([0.0, 0.25], (np.linspace(0, 1, 9),))
    err = evaluate_h01_error(ShiftedObstacle(c), np.zeros(grid.shape), grid, problem=heat_problem(),
                             tol_feas=tol)
    r = err["obstacle_violation_ratio"]
    assert 0.0 <= r <= 1.0
    assert r == (1.0 if c < -tol else 0.0)
