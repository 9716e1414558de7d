"""Min-residual loss with fractional Sobolev boundary penalties.

The total loss of a surrogate ``f`` for a :class:`~nnvi.problems.VIProblem` is

    J(f) = ||min{G[f], f - g}||^2_{L2, mu1}          interior
         + ||e||^2_{H1, mu2}                           initial slice
         + ||d||^2_{H^{3/4,3/2}(Sigma), mu3}           lateral trace
         + ||d1||^2_{H^{1/4,1/2}(Sigma), mu3}          lateral normal derivative

with ``e = f(0,.) - g(0,.)``, ``d = f - g`` and ``d1 = d(f - g)/dnu`` on
the lateral boundary.  Each fractional norm is assembled as its integer
part plus a Slobodeckij seminorm in time and one in space, all estimated
by Monte Carlo.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy import stats

from .exceptions import ContractError, DomainError, EvaluationError, ParameterError
from .problems import VIProblem, apply_operator

__all__ = [
    "SamplingPlan",
    "LossWeights",
    "LossBreakdown",
    "Batches",
    "draw_batches",
    "interior_min_residual",
    "initial_h1_loss",
    "slobodeckij_time_seminorm",
    "slobodeckij_space_seminorm",
    "lateral_fractional_loss",
    "total_loss",
    "boundary_measure",
]

TRACE_ORDERS = (0.75, 0.5)   # (time, space) fractional parts for d
NORMAL_ORDERS = (0.25, 0.5)  # (time, space) fractional parts for d1


@dataclass(frozen=True)
class SamplingPlan:
    """Batch sizes and sampling measures for the four loss terms.

    ``measure`` is ``"uniform"`` or ``"truncated_normal"``; the latter needs
    ``center`` and ``scale`` (per spatial coordinate) and applies to space
    only, time stays uniform.  ``eps_t`` / ``eps_x`` clamp the singular
    kernels of the seminorm estimators; ``None`` means ``1e-4`` times the
    horizon / smallest box width.  ``boundary_measure`` selects the measure
    on the spatial boundary used inside the seminorms: ``"surface"``
    (counting measure when ``d = 1``) or ``"probability"`` (normalised).
    """

    n_interior: int = 1024
    n_initial: int = 256
    n_lateral: int = 256
    n_time_pairs: int = 256
    n_space_pairs: int = 256
    measure: str = "uniform"
    center: Optional[tuple] = None
    scale: Optional[tuple] = None
    eps_t: Optional[float] = None
    eps_x: Optional[float] = None
    resample_each_step: bool = True
    seed: int = 0
    boundary_measure: str = "surface"
    tangential_seminorm: bool = False

    def __post_init__(self):
        for name in ("n_interior", "n_initial", "n_lateral", "n_time_pairs", "n_space_pairs"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be at least 1")
        if self.measure not in ("uniform", "truncated_normal"):
            raise ParameterError(f"unknown sampling measure {self.measure!r}")
        if self.measure == "truncated_normal" and (self.center is None or self.scale is None):
            raise ParameterError("truncated_normal sampling needs center and scale")
        if self.scale is not None and np.any(np.asarray(self.scale, dtype=float) <= 0):
            raise ParameterError("truncated_normal scale must be positive")
        for name in ("eps_t", "eps_x"):
            v = getattr(self, name)
            if v is not None and not (v > 0):
                raise ParameterError(f"{name} must be positive")
        if self.boundary_measure not in ("surface", "probability"):
            raise ParameterError(f"unknown boundary measure {self.boundary_measure!r}")

    def resolved_eps(self, problem: VIProblem) -> tuple[float, float]:
        eps_t = self.eps_t if self.eps_t is not None else 1e-4 * problem.horizon
        eps_x = self.eps_x if self.eps_x is not None else 1e-4 * float(problem.width.min())
        return eps_t, eps_x


@dataclass(frozen=True)
class LossWeights:
    w_interior: float = 1.0
    w_initial: float = 1.0
    w_lateral_trace: float = 1.0
    w_lateral_normal: float = 1.0

    def __post_init__(self):
        vals = (self.w_interior, self.w_initial, self.w_lateral_trace, self.w_lateral_normal)
        if any(v < 0 for v in vals):
            raise ParameterError("loss weights must be non-negative")
        if not (self.w_interior > 0):
            raise ParameterError("the interior weight must be positive")

    def as_tuple(self):
        return (self.w_interior, self.w_initial, self.w_lateral_trace, self.w_lateral_normal)


@dataclass
class LossBreakdown:
    """The four weighted terms, their total, and where the batches came from.

    Term attributes are 0-dim tensors (``total`` keeps the autograd graph);
    ``standard_errors`` holds Monte Carlo standard errors when requested.
    """

    interior: torch.Tensor
    initial_h1: torch.Tensor
    lateral_frac: torch.Tensor
    lateral_normal_frac: torch.Tensor
    total: torch.Tensor
    fingerprint: dict = field(default_factory=dict)
    standard_errors: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "interior": float(torch.as_tensor(self.interior).detach()),
            "initial": float(torch.as_tensor(self.initial_h1).detach()),
            "lateral_trace": float(torch.as_tensor(self.lateral_frac).detach()),
            "lateral_normal": float(torch.as_tensor(self.lateral_normal_frac).detach()),
            "total": float(torch.as_tensor(self.total).detach()),
        }


@dataclass
class Batches:
    """All sample points for one loss evaluation (numpy, float64)."""

    interior: np.ndarray
    initial: np.ndarray
    lateral: np.ndarray
    lateral_face: np.ndarray
    lateral_side: np.ndarray
    pair_t1: np.ndarray
    pair_t2: np.ndarray
    pair_gamma: np.ndarray       # (n, m, d)
    pair_gamma_face: np.ndarray  # (n, m)
    pair_gamma_side: np.ndarray  # (n, m)
    space_t: np.ndarray
    space_x: np.ndarray
    space_x_face: np.ndarray
    space_x_side: np.ndarray
    space_y: np.ndarray
    space_y_face: np.ndarray
    space_y_side: np.ndarray
    fingerprint: dict = field(default_factory=dict)


def boundary_measure(problem: VIProblem, kind: str = "surface") -> float:
    """Total measure of the spatial boundary of the box."""
    if kind == "probability":
        return 1.0
    w = problem.width
    d = problem.dim
    if d == 1:
        return 2.0
    return float(2.0 * sum(np.prod(np.delete(w, i)) for i in range(d)))


def _space_sample(problem: VIProblem, plan: SamplingPlan, rng, n: int) -> np.ndarray:
    lo, hi = problem.lower, problem.upper
    if plan.measure == "uniform":
        return rng.uniform(lo, hi, size=(n, problem.dim))
    center = np.broadcast_to(np.asarray(plan.center, dtype=float), lo.shape)
    scale = np.broadcast_to(np.asarray(plan.scale, dtype=float), lo.shape)
    a, b = (lo - center) / scale, (hi - center) / scale
    out = np.empty((n, problem.dim))
    for i in range(problem.dim):
        out[:, i] = stats.truncnorm.rvs(a[i], b[i], loc=center[i], scale=scale[i], size=n,
                                        random_state=rng)
    return out


def _boundary_sample(problem: VIProblem, plan: SamplingPlan, rng, n: int):
    """Points on the box faces (edges excluded), face chosen by area."""
    d = problem.dim
    w = problem.width
    if np.any(w <= 0):
        raise DomainError("degenerate box has no lateral boundary")
    if d == 1:
        area = np.ones(1)
    else:
        area = np.array([np.prod(np.delete(w, i)) for i in range(d)])
    face = rng.choice(d, size=n, p=area / area.sum())
    side = np.where(rng.random(n) < 0.5, -1, 1)
    x = _space_sample(problem, plan, rng, n)
    rows = np.arange(n)
    x[rows, face] = np.where(side > 0, problem.upper[face], problem.lower[face])
    return x, face, side


def draw_batches(problem: VIProblem, plan: SamplingPlan, rng: np.random.Generator,
                 scale: float = 1.0) -> Batches:
    """Draw every batch of ``plan`` (sizes multiplied by ``scale``)."""
    T = problem.horizon
    d = problem.dim

    def n(k):
        return max(1, int(round(getattr(plan, k) * scale)))

    ni = n("n_interior")
    interior = np.column_stack([rng.uniform(0, T, ni), _space_sample(problem, plan, rng, ni)])
    n0 = n("n_initial")
    initial = np.column_stack([np.zeros(n0), _space_sample(problem, plan, rng, n0)])
    nl = n("n_lateral")
    lx, lface, lside = _boundary_sample(problem, plan, rng, nl)
    lateral = np.column_stack([rng.uniform(0, T, nl), lx])

    npairs = n("n_time_pairs")
    t1 = rng.uniform(0, T, npairs)
    t2 = rng.uniform(0, T, npairs)
    if d == 1:
        gamma = np.broadcast_to(np.array([problem.lower, problem.upper])[None], (npairs, 2, 1)).copy()
        gface = np.zeros((npairs, 2), dtype=int)
        gside = np.broadcast_to(np.array([-1, 1]), (npairs, 2)).copy()
    else:
        gx, gface, gside = _boundary_sample(problem, plan, rng, npairs)
        gamma, gface, gside = gx[:, None, :], gface[:, None], gside[:, None]

    ns = n("n_space_pairs")
    st = rng.uniform(0, T, ns)
    if d == 1:
        # the two boundary points, in both orders
        sx = np.where(rng.random(ns) < 0.5, problem.lower[0], problem.upper[0])[:, None]
        sy = np.where(sx == problem.lower[0], problem.upper[0], problem.lower[0])
        sxs = np.where(sx[:, 0] == problem.upper[0], 1, -1)
        sys_ = -sxs
        sxf = syf = np.zeros(ns, dtype=int)
    else:
        sx, sxf, sxs = _boundary_sample(problem, plan, rng, ns)
        sy, syf, sys_ = _boundary_sample(problem, plan, rng, ns)
    fp = {"seed": plan.seed, "scale": scale, "n_interior": ni, "n_initial": n0, "n_lateral": nl,
          "n_time_pairs": npairs, "n_space_pairs": ns}
    return Batches(interior, initial, lateral, lface, lside, t1, t2, gamma, gface, gside,
                   st, sx, sxf, sxs, sy, syf, sys_, fp)


def _to_t(model, arr):
    return torch.as_tensor(arr, dtype=model.config.torch_dtype)


def _second_order_mode(problem: VIProblem):
    if problem.operator.diffusion_factor is not None:
        return "directional", problem.operator.diffusion_factor
    return "full", None


def interior_min_residual(model, problem: VIProblem, batch, return_samples: bool = False):
    """Mean of ``min{G[f], f - g}**2`` over interior points."""
    X = _to_t(model, batch)
    mode, L = _second_order_mode(problem)
    j = model.jet(X, hessian=mode, directions=L)
    G = apply_operator(problem.operator, j)
    g = problem.obstacle(X[:, 0], X[:, 1:])
    m = torch.minimum(G, j.value - g)
    sq = m * m
    if not torch.isfinite(sq).all():
        idx = int(torch.nonzero(~torch.isfinite(sq))[0])
        raise EvaluationError(f"non-finite interior residual at point {X[idx].tolist()}")
    return (sq.mean(), sq.detach()) if return_samples else sq.mean()


def initial_h1_loss(model, problem: VIProblem, batch, return_samples: bool = False):
    """Empirical ``||e||^2_{H1}``: mean ``e**2`` plus mean ``|grad e|**2``."""
    X = _to_t(model, batch)
    j = model.jet(X, hessian=False)
    g, dg = problem.obstacle_jet(X[:, 0], X[:, 1:], target=True)
    e = j.value - g
    de = j.grad - dg
    per = e * e + (de * de).sum(dim=1)
    if not torch.isfinite(per).all():
        raise EvaluationError("non-finite initial-slice residual")
    return (per.mean(), per.detach()) if return_samples else per.mean()


def slobodeckij_time_seminorm(t1, t2, values1, values2, rho: float, horizon: float,
                              gamma_measure: float = 1.0, eps: float = 0.0,
                              return_samples: bool = False):
    """Squared time seminorm ``[f]^2_{rho,(0,T)}`` by Monte Carlo.

    Parameters
    ----------
    t1, t2 : (n,) uniform draws on ``(0, horizon)``
    values1, values2 : (n, m) trace values at ``t1`` / ``t2`` on a shared
        boundary batch of ``m`` points per pair
    rho : fractional order in ``(0, 1)``
    gamma_measure : total measure of the spatial boundary; the ``L2``
        norm over the boundary is ``gamma_measure * mean`` over the ``m``
        points
    eps : lower clamp on ``|t1 - t2|`` in the kernel
    """
    t1 = torch.as_tensor(t1)
    t2 = torch.as_tensor(t2, dtype=t1.dtype)
    v1 = torch.as_tensor(values1)
    v2 = torch.as_tensor(values2, dtype=v1.dtype)
    if t1.numel() == 0:
        raise ContractError("empty pair set")
    if v1.ndim == 1:
        v1, v2 = v1[:, None], v2[:, None]
    if v1.shape != v2.shape or v1.shape[0] != t1.shape[0]:
        raise ContractError("trace values must be (n_pairs, m) for both times")
    l2 = gamma_measure * ((v1 - v2) ** 2).mean(dim=1)
    gap = torch.clamp((t1 - t2).abs(), min=eps).to(v1.dtype)
    per = horizon ** 2 * l2 / gap ** (2.0 * rho + 1.0)
    return (per.mean(), per.detach()) if return_samples else per.mean()


def slobodeckij_space_seminorm(x, y, values_x, values_y, theta: float, dim: int, horizon: float,
                               gamma_measure: float = 1.0, eps: float = 0.0,
                               return_samples: bool = False):
    """``int_0^T [f(t,.)]^2_{theta,Gamma} dt`` by Monte Carlo.

    ``x``, ``y`` are ``(n, d)`` boundary points drawn from the normalised
    boundary measure at independent uniform times; ``values_*`` are the
    matching values (``(n,)``) or vectors (``(n, k)``).
    """
    x = torch.as_tensor(x)
    y = torch.as_tensor(y, dtype=x.dtype)
    vx = torch.as_tensor(values_x)
    vy = torch.as_tensor(values_y, dtype=vx.dtype)
    if x.shape[0] == 0:
        raise ContractError("empty pair set")
    diff = vx - vy
    num = diff * diff if diff.ndim == 1 else (diff * diff).sum(dim=1)
    dist = torch.clamp(torch.linalg.vector_norm(x - y, dim=1), min=eps).to(vx.dtype)
    per = horizon * gamma_measure ** 2 * num / dist ** (2.0 * theta + dim - 1)
    return (per.mean(), per.detach()) if return_samples else per.mean()


def _boundary_jet(model, problem, t, x, face, side):
    """``d = f - g`` and its gradient on boundary points, plus ``d1``."""
    X = torch.cat([t[:, None], x], dim=1)
    j = model.jet(X, hessian=False)
    g, dg = problem.obstacle_jet(X[:, 0], X[:, 1:], target=True)
    d = j.value - g
    grad = j.grad - dg
    rows = torch.arange(x.shape[0])
    f_idx = torch.as_tensor(face, dtype=torch.long)
    d1 = grad[rows, f_idx] * torch.as_tensor(side, dtype=grad.dtype)
    tang = grad.clone()
    tang[rows, f_idx] = 0.0
    return d, d1, tang


def lateral_fractional_loss(model, problem: VIProblem, batches: Batches, plan: SamplingPlan,
                            return_samples: bool = False):
    """``(trace_term, normal_term)`` on the lateral boundary.

    trace  = mean d^2 + mean |tangential grad d|^2 + [d]^2_{3/4,time} + int [d]^2_{1/2,space}
    normal = mean d1^2 + [d1]^2_{1/4,time} + int [d1]^2_{1/2,space}
    """
    if problem.dim > 1 and np.any(problem.width <= 0):
        raise DomainError("degenerate box has no lateral boundary")
    T = problem.horizon
    dim = problem.dim
    eps_t, eps_x = plan.resolved_eps(problem)
    gm = boundary_measure(problem, plan.boundary_measure)
    c = lambda a: _to_t(model, a)

    L = c(batches.lateral)
    d, d1, tang = _boundary_jet(model, problem, L[:, 0], L[:, 1:], batches.lateral_face,
                                batches.lateral_side)
    trace_int = d * d + (tang * tang).sum(dim=1)
    normal_int = d1 * d1

    n, m, _ = batches.pair_gamma.shape
    gx = c(batches.pair_gamma.reshape(n * m, dim))
    gface = batches.pair_gamma_face.reshape(-1)
    gside = batches.pair_gamma_side.reshape(-1)
    t1 = c(np.repeat(batches.pair_t1, m))
    t2 = c(np.repeat(batches.pair_t2, m))
    da, d1a, _ = _boundary_jet(model, problem, t1, gx, gface, gside)
    db, d1b, _ = _boundary_jet(model, problem, t2, gx, gface, gside)
    pt1, pt2 = c(batches.pair_t1), c(batches.pair_t2)
    tr_time = slobodeckij_time_seminorm(pt1, pt2, da.reshape(n, m), db.reshape(n, m),
                                        TRACE_ORDERS[0], T, gm, eps_t, True)
    no_time = slobodeckij_time_seminorm(pt1, pt2, d1a.reshape(n, m), d1b.reshape(n, m),
                                        NORMAL_ORDERS[0], T, gm, eps_t, True)

    st = c(batches.space_t)
    sx, sy = c(batches.space_x), c(batches.space_y)
    dx, d1x, tx = _boundary_jet(model, problem, st, sx, batches.space_x_face, batches.space_x_side)
    dy, d1y, ty = _boundary_jet(model, problem, st, sy, batches.space_y_face, batches.space_y_side)
    if dim == 1:
        # exact counting-measure sum over the two ordered pairs of boundary points
        gm_space = math.sqrt(0.5) if plan.boundary_measure == "probability" else math.sqrt(2.0)
    else:
        gm_space = gm
    tr_space = slobodeckij_space_seminorm(sx, sy, dx, dy, TRACE_ORDERS[1], dim, T,
                                          gm_space, eps_x, True)
    no_space = slobodeckij_space_seminorm(sx, sy, d1x, d1y, NORMAL_ORDERS[1], dim, T,
                                          gm_space, eps_x, True)
    trace_parts = [(trace_int.mean(), trace_int.detach()), tr_time, tr_space]
    if plan.tangential_seminorm and dim > 1:
        trace_parts.append(slobodeckij_space_seminorm(sx, sy, tx, ty, TRACE_ORDERS[1], dim, T,
                                                      gm_space, eps_x, True))
    normal_parts = [(normal_int.mean(), normal_int.detach()), no_time, no_space]
    trace = sum(p[0] for p in trace_parts)
    normal = sum(p[0] for p in normal_parts)
    if not (torch.isfinite(trace) and torch.isfinite(normal)):
        raise EvaluationError("non-finite lateral boundary term")
    if return_samples:
        return trace, normal, [p[1] for p in trace_parts], [p[1] for p in normal_parts]
    return trace, normal


def _se(samples) -> float:
    """Standard error of a sum of independent sample means."""
    var = 0.0
    for s in samples:
        s = s.double()
        if s.numel() > 1:
            var += float(s.var(unbiased=True)) / s.numel()
    return math.sqrt(var)


def total_loss(model, problem: VIProblem, plan: SamplingPlan, weights: LossWeights = LossWeights(),
               batches: Optional[Batches] = None, rng: Optional[np.random.Generator] = None,
               with_errors: bool = False) -> LossBreakdown:
    """All four terms and their weighted sum, differentiable in the parameters.

    Batches are drawn from ``rng`` (or a generator seeded with
    ``plan.seed``) unless given explicitly.
    """
    if batches is None:
        batches = draw_batches(problem, plan, rng if rng is not None else np.random.default_rng(plan.seed))
    w = weights
    interior, s_int = interior_min_residual(model, problem, batches.interior, return_samples=True)
    initial, s_ini = initial_h1_loss(model, problem, batches.initial, return_samples=True)
    trace, normal, s_tr, s_no = lateral_fractional_loss(model, problem, batches, plan, return_samples=True)
    total = (w.w_interior * interior + w.w_initial * initial
             + w.w_lateral_trace * trace + w.w_lateral_normal * normal)
    ses = {}
    if with_errors:
        ses = {"interior": _se([s_int]), "initial": _se([s_ini]),
               "lateral_trace": _se(s_tr), "lateral_normal": _se(s_no)}
    return LossBreakdown(interior, initial, trace, normal, total, dict(batches.fingerprint), ses)
