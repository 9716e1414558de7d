"""Minimise the total loss over the surrogate parameters."""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .exceptions import ContractError, DivergenceError, DomainError, EvaluationError, ParameterError
from .loss import LossWeights, SamplingPlan, draw_batches, total_loss
from .problems import VIProblem
from .surrogate import SurrogateConfig, SurrogateModel, save_checkpoint

__all__ = ["TrainConfig", "TrainReport", "GridSpec", "train", "train_seeds",
           "evaluate_h01_error", "LOG_COLUMNS", "write_training_log"]

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "interior", "initial", "lateral_trace", "lateral_normal", "total")


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser, schedule and checkpointing for :func:`train`.

    ``learning_rate`` decays to ``final_learning_rate`` along a cosine
    (``schedule="cosine"``) or stays fixed (``"constant"``).  With
    ``optimizer="lbfgs-finish"`` the Adam phase is followed by
    ``lbfgs_steps`` L-BFGS iterations, split into ``lbfgs_rounds`` rounds
    that each draw a fresh batch ``eval_scale`` times the training batch.
    The best model is selected on a fixed evaluation batch of the same
    size, checked every ``checkpoint_every`` steps and after each round.
    """

    steps: int = 20_000
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    final_learning_rate: float = 1e-5
    schedule: str = "cosine"
    plan: SamplingPlan = field(default_factory=SamplingPlan)
    weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 500
    seeds: tuple = (0,)
    early_stop: Optional[float] = None
    eval_scale: float = 4.0
    lbfgs_steps: int = 200
    lbfgs_rounds: int = 1
    milestones: tuple = (0.05, 0.25, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "milestones", tuple(float(m) for m in self.milestones))
        if self.steps < 0:
            raise ParameterError("steps must be non-negative")
        if not (self.learning_rate > 0) or not (self.final_learning_rate > 0):
            raise ParameterError("learning rates must be positive")
        if self.optimizer not in ("adam", "lbfgs-finish"):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ParameterError(f"unknown schedule {self.schedule!r}")
        if self.checkpoint_every < 1:
            raise ParameterError("checkpoint_every must be at least 1")
        if self.lbfgs_rounds < 1:
            raise ParameterError("lbfgs_rounds must be at least 1")
        if not self.seeds:
            raise ParameterError("need at least one seed")
        if any(not (0 < m <= 1) for m in self.milestones):
            raise ParameterError("milestones are fractions of the step budget in (0, 1]")

    def lr_at(self, step: int) -> float:
        if self.schedule == "constant" or self.steps <= 1:
            return self.learning_rate
        frac = step / (self.steps - 1)
        lo, hi = self.final_learning_rate, self.learning_rate
        return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * frac))


@dataclass
class TrainReport:
    """Loss history and bookkeeping of one training run."""

    history: dict
    wall_clock: float
    seed: int
    steps_executed: int
    eval_history: list = field(default_factory=list)
    best_eval_loss: float = float("inf")
    best_step: int = -1
    milestones: list = field(default_factory=list)
    checkpoint_id: Optional[str] = None
    lbfgs_history: list = field(default_factory=list)
    stopped_early: bool = False

    def best_so_far(self) -> np.ndarray:
        return np.minimum.accumulate(np.asarray(self.history["total"], dtype=float))


def write_training_log(report: TrainReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for i in range(report.steps_executed):
            w.writerow([i] + [repr(float(report.history[c][i])) for c in LOG_COLUMNS[1:]])
    return path


def _eval_loss(model, problem, plan, weights, batches) -> dict:
    with torch.no_grad():
        return total_loss(model, problem, plan, weights, batches=batches).as_dict()


def train(problem: VIProblem, s_cfg: SurrogateConfig, t_cfg: TrainConfig, seed: Optional[int] = None,
          checkpoint_dir=None, callback: Optional[Callable] = None,
          model: Optional[SurrogateModel] = None) -> tuple[SurrogateModel, TrainReport]:
    """Train a surrogate for ``problem`` and return the best checkpoint.

    ``seed`` (default ``t_cfg.seeds[0]``) offsets both the parameter seed and
    the sampling seed.  ``callback(step, model, breakdown_dict)`` runs after
    each optimiser step.  Raises :class:`DivergenceError` (carrying the best
    state so far) when the loss becomes non-finite.
    """
    seed = t_cfg.seeds[0] if seed is None else int(seed)
    if model is None:
        s_cfg = replace(s_cfg, parameter_seed=s_cfg.parameter_seed + seed)
        model = SurrogateModel.for_problem(s_cfg, problem)
    elif model.input_dim != 1 + problem.dim:
        raise ContractError("model input dimension does not match the problem")
    plan, weights = t_cfg.plan, t_cfg.weights
    rng = np.random.default_rng([plan.seed, seed])
    eval_batches = draw_batches(problem, plan, np.random.default_rng([plan.seed, seed, 1]),
                                scale=t_cfg.eval_scale)
    fixed = None if plan.resample_each_step else draw_batches(problem, plan, rng)

    history = {c: [] for c in LOG_COLUMNS[1:]}
    report = TrainReport(history, 0.0, seed, 0)
    start = time.perf_counter()

    best_state = copy.deepcopy(model.state_dict())
    first = _eval_loss(model, problem, plan, weights, eval_batches)
    report.eval_history.append((0, first))
    report.best_eval_loss, report.best_step = first["total"], 0
    milestone_steps = sorted({max(1, math.ceil(m * t_cfg.steps)) for m in t_cfg.milestones}) \
        if t_cfg.steps else []

    def checkpoint(step):
        nonlocal best_state
        ev = _eval_loss(model, problem, plan, weights, eval_batches)
        report.eval_history.append((step, ev))
        if math.isfinite(ev["total"]) and ev["total"] < report.best_eval_loss:
            report.best_eval_loss, report.best_step = ev["total"], step
            best_state = copy.deepcopy(model.state_dict())
        return ev

    opt = torch.optim.Adam(model.parameters(), lr=t_cfg.learning_rate)
    for step in range(t_cfg.steps):
        for group in opt.param_groups:
            group["lr"] = t_cfg.lr_at(step)
        batches = fixed if fixed is not None else draw_batches(problem, plan, rng)
        try:
            br = total_loss(model, problem, plan, weights, batches=batches)
        except EvaluationError:
            if all(torch.isfinite(p).all() for p in model.parameters()):
                raise
            br = None
        if br is None or not torch.isfinite(br.total):
            model.load_state_dict(best_state)
            raise DivergenceError(f"non-finite loss at step {step}; restored best checkpoint "
                                  f"(step {report.best_step})", best_state, step)
        opt.zero_grad(set_to_none=True)
        br.total.backward()
        opt.step()
        vals = br.as_dict()
        for k in history:
            history[k].append(vals[k])
        report.steps_executed = step + 1
        if callback is not None:
            callback(step, model, vals)
        done = step + 1
        if done % t_cfg.checkpoint_every == 0 or done == t_cfg.steps or done in milestone_steps:
            ev = checkpoint(done)
            if done in milestone_steps:
                report.milestones.append({"step": done, "fraction": done / t_cfg.steps,
                                          "eval": dict(ev), "best_eval_total": report.best_eval_loss,
                                          "state": copy.deepcopy(best_state)})
            if t_cfg.early_stop is not None and report.best_eval_loss <= t_cfg.early_stop:
                report.stopped_early = True
                break

    if t_cfg.optimizer == "lbfgs-finish" and t_cfg.lbfgs_steps > 0 and not report.stopped_early:
        model.load_state_dict(best_state)
        per_round = math.ceil(t_cfg.lbfgs_steps / t_cfg.lbfgs_rounds)
        for _ in range(t_cfg.lbfgs_rounds):
            # fresh batch and fresh curvature history each round
            lb_batches = draw_batches(problem, plan, rng, scale=t_cfg.eval_scale)
            lbfgs = torch.optim.LBFGS(model.parameters(), lr=1.0, max_iter=per_round,
                                      history_size=50, line_search_fn="strong_wolfe")

            def closure():
                lbfgs.zero_grad(set_to_none=True)
                loss = total_loss(model, problem, plan, weights, batches=lb_batches).total
                loss.backward()
                report.lbfgs_history.append(float(loss.detach()))
                return loss

            try:
                lbfgs.step(closure)
            except Exception as exc:  # non-finite line search etc.
                log.warning("L-BFGS phase aborted: %s", exc)
                model.load_state_dict(best_state)
                break
            checkpoint(report.steps_executed)
        ev = report.eval_history[-1][1]
        # the end-of-training milestone includes the L-BFGS phase
        if report.milestones and report.milestones[-1]["fraction"] == 1.0:
            report.milestones[-1].update(eval=dict(ev), best_eval_total=report.best_eval_loss,
                                         state=copy.deepcopy(best_state))

    model.load_state_dict(best_state)
    report.wall_clock = time.perf_counter() - start
    if checkpoint_dir is not None:
        d = Path(checkpoint_dir)
        d.mkdir(parents=True, exist_ok=True)
        path = save_checkpoint(model, d / f"model_seed{seed}.npz",
                               extra={"seed": seed, "best_step": report.best_step,
                                      "best_eval_loss": report.best_eval_loss})
        report.checkpoint_id = path.name
    return model, report


def train_seeds(problem: VIProblem, s_cfg: SurrogateConfig, t_cfg: TrainConfig, **kw):
    """Independent runs for every seed of ``t_cfg.seeds``."""
    return [train(problem, s_cfg, t_cfg, seed=s, **kw) for s in t_cfg.seeds]


@dataclass(frozen=True)
class GridSpec:
    """Tensor-product evaluation grid: times and one coordinate array per space axis."""

    t: np.ndarray
    x: tuple

    def __post_init__(self):
        object.__setattr__(self, "t", np.atleast_1d(np.asarray(self.t, dtype=float)))
        object.__setattr__(self, "x", tuple(np.atleast_1d(np.asarray(a, dtype=float)) for a in self.x))

    @property
    def shape(self):
        return (self.t.size,) + tuple(a.size for a in self.x)

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(self.t, *self.x, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


def evaluate_h01_error(model, reference, grid: GridSpec, problem: Optional[VIProblem] = None,
                       tol_feas: Optional[float] = None) -> dict:
    """Discrete error norms of ``model - reference`` on a tensor grid.

    ``reference`` is a callable on ``(n, 1+d)`` points or an array of shape
    ``grid.shape``.  ``l2_error`` is the root mean square, ``h01_error`` adds
    the mean squared spatial difference quotients, ``sup_error`` is the max
    absolute difference.  With a ``problem``, ``obstacle_violation_ratio`` is
    the fraction of grid points where ``model < g - tol_feas``.
    """
    pts = grid.points()
    if problem is not None:
        if not problem.contains(pts).all():
            raise DomainError("evaluation grid leaves the problem box")
    with torch.no_grad():
        f = model(torch.as_tensor(pts, dtype=model.config.torch_dtype)).double().numpy()
    ref = reference(pts) if callable(reference) else np.asarray(reference, dtype=float)
    ref = np.asarray(ref, dtype=float).reshape(grid.shape)
    f = f.reshape(grid.shape)
    diff = f - ref
    l2 = float(np.sqrt(np.mean(diff ** 2)))
    grad_sq = 0.0
    for axis, coords in enumerate(grid.x, start=1):
        if coords.size > 1:
            grad_sq += np.mean(np.gradient(diff, coords, axis=axis) ** 2)
    out = {"l2_error": l2, "h01_error": float(np.sqrt(l2 ** 2 + grad_sq)),
           "h01_gradient_part": float(np.sqrt(grad_sq)), "sup_error": float(np.abs(diff).max())}
    if problem is not None:
        t = torch.as_tensor(pts[:, 0])
        g = problem.obstacle(t, torch.as_tensor(pts[:, 1:])).numpy().reshape(grid.shape)
        if tol_feas is None:
            tol_feas = 1e-3 * max(float(np.abs(g).max()), 1e-12)
        out["obstacle_violation_ratio"] = float(np.mean(f < g - tol_feas))
        out["tol_feas"] = tol_feas
    return out
