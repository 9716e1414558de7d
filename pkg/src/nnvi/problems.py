"""Parabolic obstacle problems on axis-aligned boxes.

Every problem is stored on a forward clock: the operator reads

    G[u] = s * du/dt - sum_ij a_ij d2u/dx_i dx_j + sum_i b_i du/dx_i + c u

with ``s = time_sign`` (+1 for the forward form used internally), the
obstacle is imposed at ``t = 0`` and on the lateral faces of the box.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .exceptions import DomainError, EvaluationError, ParameterError
from .utility import UtilityFamily

__all__ = [
    "ParabolicOperator",
    "VIProblem",
    "DualProblemSpec",
    "AmericanPutSpec",
    "apply_operator",
    "build_dual_investment_problem",
    "build_american_put_problem",
    "check_parabolicity",
    "check_boundary_consistency",
]


@dataclass(frozen=True)
class ParabolicOperator:
    """Coefficients of a linear second-order parabolic operator.

    ``second_order(t, x)`` returns ``(B, d, d)``, ``first_order(t, x)``
    returns ``(B, d)`` and ``zeroth_order(t, x)`` returns ``(B,)``, with
    ``t`` of shape ``(B,)`` and ``x`` of shape ``(B, d)``.

    When the diffusion matrix is constant, ``diffusion_factor`` holds a
    ``(d, k)`` matrix ``L`` with ``a = L L^T``; the second-order term is then
    evaluated from ``k`` directional second derivatives instead of the full
    Hessian.
    """

    dim: int
    second_order: Callable
    first_order: Callable
    zeroth_order: Callable
    time_sign: int = 1
    diffusion_factor: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.time_sign not in (1, -1):
            raise ParameterError("time_sign must be +1 (forward) or -1 (backward)")

    @classmethod
    def constant(cls, a, b, c, time_sign: int = 1) -> "ParabolicOperator":
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        c = float(c)
        d = a.shape[0]
        if a.shape != (d, d) or b.shape != (d,):
            raise ParameterError(f"inconsistent coefficient shapes {a.shape}, {b.shape}")
        if not np.allclose(a, a.T, rtol=0, atol=1e-14):
            raise ParameterError("second-order coefficient must be symmetric")
        w, v = np.linalg.eigh(a)
        if w.min() < -1e-12:
            raise ParameterError("second-order coefficient must be positive semidefinite")
        factor = v * np.sqrt(np.clip(w, 0.0, None))

        def second(t, x):
            return torch.as_tensor(a, dtype=x.dtype).expand(x.shape[0], d, d)

        def first(t, x):
            return torch.as_tensor(b, dtype=x.dtype).expand(x.shape[0], d)

        def zeroth(t, x):
            return torch.full((x.shape[0],), c, dtype=x.dtype)

        op = cls(d, second, first, zeroth, time_sign, factor)
        object.__setattr__(op, "_constants", (a, b, c))
        return op

    @property
    def constants(self):
        """``(a, b, c)`` for constant-coefficient operators, else ``None``."""
        return getattr(self, "_constants", None)


def _check_finite(name, tensor, points):
    bad = ~torch.isfinite(tensor)
    if bad.any():
        idx = int(torch.nonzero(bad.reshape(bad.shape[0], -1).any(dim=1))[0])
        p = points[idx].detach().cpu().numpy().tolist() if points is not None else "?"
        raise EvaluationError(f"non-finite {name} at point {p}")


def apply_operator(op: ParabolicOperator, jet) -> torch.Tensor:
    """Residual ``G[u]`` at every point of a batched jet.

    ``jet`` needs ``points``, ``value``, ``dt`` and ``grad``; and either a full
    ``hessian`` or ``dir2``, the second derivatives along the columns of
    ``op.diffusion_factor``.
    """
    pts = jet.points
    t, x = pts[:, 0], pts[:, 1:]
    for name in ("value", "dt", "grad"):
        _check_finite(f"jet {name}", getattr(jet, name), pts)
    b = op.first_order(t, x)
    c = op.zeroth_order(t, x)
    _check_finite("first-order coefficient", b, pts)
    _check_finite("zeroth-order coefficient", c, pts)
    if getattr(jet, "hessian", None) is not None:
        _check_finite("jet hessian", jet.hessian, pts)
        a = op.second_order(t, x)
        _check_finite("second-order coefficient", a, pts)
        diffusion = (a * jet.hessian).sum(dim=(1, 2))
    elif getattr(jet, "dir2", None) is not None:
        if op.diffusion_factor is None:
            raise EvaluationError("directional jet requires a constant diffusion factor")
        _check_finite("jet dir2", jet.dir2, pts)
        diffusion = jet.dir2.sum(dim=1)
    else:
        raise EvaluationError("jet carries no second-order information")
    return op.time_sign * jet.dt - diffusion + (b * jet.grad).sum(dim=1) + c * jet.value


@dataclass(frozen=True)
class VIProblem:
    """``min{G[u], u - g} = 0`` on ``(0, horizon) x box`` with ``u = g`` on
    the parabolic boundary."""

    operator: ParabolicOperator
    obstacle: Callable
    lower: np.ndarray
    upper: np.ndarray
    horizon: float
    boundary_target: Optional[Callable] = None
    name: str = "custom"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape or lo.shape != (self.operator.dim,):
            raise DomainError(f"box bounds must have shape ({self.operator.dim},)")
        if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
            raise DomainError("box bounds must be finite")
        if np.any(hi <= lo):
            raise DomainError(f"box has non-positive volume: lower={lo}, upper={hi}")
        if not (self.horizon > 0):
            raise DomainError(f"horizon must be positive, got {self.horizon}")
        if self.boundary_target is None:
            object.__setattr__(self, "boundary_target", self.obstacle)

    @property
    def dim(self) -> int:
        return self.operator.dim

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def obstacle_jet(self, t: torch.Tensor, x: torch.Tensor, target: bool = False):
        """Obstacle (or boundary target) value and spatial gradient."""
        fn = self.boundary_target if target else self.obstacle
        with torch.enable_grad():
            xg = x.detach().requires_grad_(True)
            val = fn(t.detach(), xg)
            if not val.requires_grad:  # obstacle independent of x
                return val.detach(), torch.zeros_like(xg)
            (grad,) = torch.autograd.grad(val.sum(), xg, allow_unused=True)
        if grad is None:
            grad = torch.zeros_like(xg)
        return val.detach(), grad.detach()

    def contains(self, points, atol: float = 1e-12) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        ok_t = (p[:, 0] >= -atol) & (p[:, 0] <= self.horizon + atol)
        ok_x = np.all((p[:, 1:] >= self.lower - atol) & (p[:, 1:] <= self.upper + atol), axis=1)
        return ok_t & ok_x


def check_parabolicity(op: ParabolicOperator, points, lam: float) -> dict:
    """Sampled uniform-parabolicity diagnostic.

    Returns the smallest eigenvalue of ``a(t, x)`` over ``points`` and
    whether it exceeds ``lam`` (up to round-off), plus the largest
    asymmetry seen.
    """
    pts = torch.as_tensor(np.atleast_2d(points), dtype=torch.float64)
    a = op.second_order(pts[:, 0], pts[:, 1:]).detach().cpu().numpy()
    asym = float(np.abs(a - np.swapaxes(a, 1, 2)).max())
    min_eig = float(np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, 1, 2))).min())
    return {"min_eigenvalue": min_eig, "asymmetry": asym,
            "passed": min_eig >= lam - 1e-12 and asym <= 1e-12}


def check_boundary_consistency(problem: VIProblem, n: int = 256, seed: int = 0) -> float:
    """Max ``|obstacle - boundary_target|`` over sampled parabolic-boundary points."""
    rng = np.random.default_rng(seed)
    d = problem.dim
    x0 = rng.uniform(problem.lower, problem.upper, size=(n, d))
    t0 = np.zeros(n)
    tl = rng.uniform(0, problem.horizon, size=n)
    xl = rng.uniform(problem.lower, problem.upper, size=(n, d))
    face = rng.integers(0, d, size=n)
    side = rng.integers(0, 2, size=n)
    xl[np.arange(n), face] = np.where(side == 1, problem.upper[face], problem.lower[face])
    t = torch.as_tensor(np.concatenate([t0, tl]))
    x = torch.as_tensor(np.concatenate([x0, xl]))
    diff = problem.obstacle(t, x) - problem.boundary_target(t, x)
    return float(diff.abs().max())


@dataclass(frozen=True)
class DualProblemSpec:
    """Market and utility data of the investment-and-stopping problem.

    The log-dual variable ``z = log y`` is truncated to ``[z_lo, z_hi]``.
    """

    utility: UtilityFamily
    mu: float
    r: float
    sigma: float
    beta: float
    K: float
    T: float
    z_lo: float = -6.0
    z_hi: float = 4.0

    def __post_init__(self):
        if not (self.sigma > 0):
            raise ParameterError(f"sigma must be positive, got {self.sigma}")
        if not (self.beta > 0):
            raise ParameterError(f"beta must be positive, got {self.beta}")
        if not (self.T > 0):
            raise ParameterError(f"T must be positive, got {self.T}")
        if self.mu == self.r:
            raise ParameterError("mu == r gives zero market price of risk; the transform is undefined")
        if not (math.isfinite(self.z_lo) and math.isfinite(self.z_hi)):
            raise DomainError("z box must be finite")
        if self.z_lo >= self.z_hi:
            raise DomainError(f"z box is empty: [{self.z_lo}, {self.z_hi}]")

    @property
    def theta(self) -> float:
        return (self.mu - self.r) / self.sigma

    @property
    def rho(self) -> float:
        return 2.0 * self.beta / self.theta ** 2

    @property
    def kappa(self) -> float:
        return (2.0 * self.r - 2.0 * self.beta) / self.theta ** 2 + 1.0

    @property
    def tau_max(self) -> float:
        return self.theta ** 2 * self.T / 2.0

    @staticmethod
    def invert_constants(kappa: float, rho: float, tau_max: float, T: float):
        """Recover ``(r, beta, theta**2)`` from the transformed constants."""
        theta2 = 2.0 * tau_max / T
        beta = rho * theta2 / 2.0
        r = beta + (kappa - 1.0) * theta2 / 2.0
        return r, beta, theta2

    def to_tau(self, t):
        return self.theta ** 2 * (self.T - np.asarray(t, dtype=float)) / 2.0

    def to_t(self, tau):
        return self.T - 2.0 * np.asarray(tau, dtype=float) / self.theta ** 2

    def obstacle_np(self, z):
        return self.utility.dual(np.exp(np.asarray(z, dtype=float)), self.K)


def build_dual_investment_problem(spec: DualProblemSpec) -> VIProblem:
    """Transformed dual VI on ``(0, tau_max) x [z_lo, z_hi]``.

    Operator ``d_tau - d_zz + kappa d_z + rho``; obstacle, initial datum and
    lateral target are all ``U~_K(exp(z))``.
    """
    if not spec.utility.has_closed_form_dual():
        raise ParameterError("the dual problem needs a utility with closed-form conjugate")
    op = ParabolicOperator.constant([[1.0]], [spec.kappa], spec.rho)
    utility, K = spec.utility, spec.K

    def obstacle(t, x):
        return utility.dual_of_log_torch(x[:, 0], K)

    return VIProblem(op, obstacle, [spec.z_lo], [spec.z_hi], spec.tau_max,
                     name=f"dual_{utility.kind}", meta={"spec": spec})


@dataclass(frozen=True)
class AmericanPutSpec:
    """American put on the product of ``d`` correlated geometric Brownian assets."""

    d: int
    K: float
    T: float
    r: float
    delta: np.ndarray
    sigma: np.ndarray
    rho: np.ndarray
    s0: np.ndarray
    x_lo: Optional[np.ndarray] = None
    x_hi: Optional[np.ndarray] = None
    box_sd: float = 4.0

    def __post_init__(self):
        d = int(self.d)
        if d < 1:
            raise ParameterError("need at least one asset")

        def vec(v, name):
            arr = np.broadcast_to(np.asarray(v, dtype=float), (d,)).copy()
            object.__setattr__(self, name, arr)
            return arr

        vec(self.delta, "delta")
        sig = vec(self.sigma, "sigma")
        s0 = vec(self.s0, "s0")
        rho = np.asarray(self.rho, dtype=float)
        if rho.ndim == 0:
            rho = np.full((d, d), float(rho))
            np.fill_diagonal(rho, 1.0)
        object.__setattr__(self, "rho", rho)
        if rho.shape != (d, d):
            raise ParameterError(f"correlation matrix must be {d}x{d}")
        if not np.allclose(rho, rho.T, atol=1e-12) or not np.allclose(np.diag(rho), 1.0):
            raise ParameterError("correlation matrix must be symmetric with unit diagonal")
        if np.linalg.eigvalsh(rho).min() < -1e-10:
            raise ParameterError("correlation matrix is not positive semidefinite")
        if np.any(sig <= 0):
            raise ParameterError("all volatilities must be positive")
        if not (self.K > 0) or not (self.T > 0):
            raise ParameterError("strike and maturity must be positive")
        if np.any(s0 <= 0):
            raise ParameterError("initial prices must be positive")
        half = self.box_sd * sig * math.sqrt(self.T)
        if self.x_lo is None:
            object.__setattr__(self, "x_lo", np.log(s0) - half)
        else:
            vec(self.x_lo, "x_lo")
        if self.x_hi is None:
            object.__setattr__(self, "x_hi", np.log(s0) + half)
        else:
            vec(self.x_hi, "x_hi")

    @classmethod
    def symmetric(cls, d, K=1.0, T=1.0, r=0.05, delta=0.0, sigma=0.2, rho=0.0, s0=1.0, **kw):
        return cls(d, K, T, r, delta, sigma, rho, s0, **kw)

    @property
    def covariance(self) -> np.ndarray:
        return self.rho * np.outer(self.sigma, self.sigma)

    def payoff_np(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.maximum(self.K - np.exp(x.sum(axis=1)), 0.0)


def build_american_put_problem(spec: AmericanPutSpec) -> VIProblem:
    """Log-price put VI on the forward clock ``tau' = T - t``."""
    a = 0.5 * spec.covariance
    b = -(spec.r - spec.delta - 0.5 * spec.sigma ** 2)
    op = ParabolicOperator.constant(a, b, spec.r)
    K = spec.K

    def obstacle(t, x):
        return torch.clamp(K - torch.exp(x.sum(dim=1)), min=0.0)

    return VIProblem(op, obstacle, spec.x_lo, spec.x_hi, spec.T,
                     name=f"american_put_d{spec.d}", meta={"spec": spec})
