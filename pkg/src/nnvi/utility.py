"""Utility functions and their convex conjugates.

The conjugate used throughout is the floor-shifted dual

    U~_K(y) = sup_{x > K} [U(x - K) - x y],   y > 0,

which for both built-in families has a closed form.  A numeric
golden-section fallback handles arbitrary concave utilities.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
from scipy import optimize

__all__ = ["UtilityFamily", "dual_utility", "numeric_dual_utility"]

_KINDS = ("power", "non_hara", "custom")


def _nonhara_H(x):
    # sqrt(1 + 4x) - 1 without cancellation for small x
    return np.sqrt(2.0) * (4.0 * x / (np.sqrt(1.0 + 4.0 * x) + 1.0)) ** -0.5


@dataclass(frozen=True)
class UtilityFamily:
    """A utility family with closed-form primal and dual.

    Parameters
    ----------
    kind : {"power", "non_hara", "custom"}
    gamma : float, optional
        Risk-aversion exponent of the power utility ``x**gamma / gamma``.
    func : callable, optional
        ``U(x)`` for ``kind="custom"``; its dual is computed numerically.
    """

    kind: str
    gamma: Optional[float] = None
    func: Optional[Callable] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown utility kind {self.kind!r}; expected one of {_KINDS}")
        if self.kind == "power":
            if self.gamma is None or not (0.0 < self.gamma < 1.0):
                raise ValueError(f"power utility needs 0 < gamma < 1, got {self.gamma!r}")
        if self.kind == "custom" and self.func is None:
            raise ValueError("custom utility needs a callable func")

    @classmethod
    def power(cls, gamma: float) -> "UtilityFamily":
        return cls("power", gamma=gamma)

    @classmethod
    def non_hara(cls) -> "UtilityFamily":
        return cls("non_hara")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "power":
            return np.where(x >= 0, np.abs(x) ** self.gamma / self.gamma, -np.inf)
        if self.kind == "non_hara":
            with np.errstate(divide="ignore", invalid="ignore"):
                h = _nonhara_H(x)
                out = h ** -3 / 3.0 + 1.0 / h + x * h
            # U(0) = 0 is the limit as H -> infinity
            return np.where(x > 0, out, np.where(x == 0, 0.0, -np.inf))
        return np.asarray(self.func(x), dtype=float)

    def derivative(self, x):
        """Marginal utility ``U'(x)`` for ``x > 0``."""
        x = np.asarray(x, dtype=float)
        if self.kind == "power":
            return x ** (self.gamma - 1.0)
        if self.kind == "non_hara":
            return _nonhara_H(x)
        h = 1e-6 * np.maximum(1.0, np.abs(x))
        return (self.func(x + h) - self.func(x - h)) / (2 * h)

    def has_closed_form_dual(self) -> bool:
        return self.kind in ("power", "non_hara")

    def dual(self, y, K: float = 0.0):
        """Closed-form ``U~_K(y)``."""
        y = np.asarray(y, dtype=float)
        if self.kind == "power":
            g = self.gamma
            return (1.0 - g) / g * y ** (g / (g - 1.0)) - K * y
        if self.kind == "non_hara":
            return y ** -3 / 3.0 + 1.0 / y - K * y
        raise NotImplementedError("custom utilities only have a numeric dual")

    def dual_derivative(self, y, K: float = 0.0):
        """``d/dy U~_K(y) = -x*(y)`` where ``x*`` is the maximiser."""
        y = np.asarray(y, dtype=float)
        return -self.dual_argmax(y, K)

    def dual_argmax(self, y, K: float = 0.0):
        y = np.asarray(y, dtype=float)
        if self.kind == "power":
            return K + y ** (1.0 / (self.gamma - 1.0))
        if self.kind == "non_hara":
            return K + y ** -2 + y ** -4
        raise NotImplementedError("custom utilities only have a numeric dual")

    def dual_of_log_torch(self, z: torch.Tensor, K: float = 0.0) -> torch.Tensor:
        """``U~_K(exp(z))`` written in torch so it can be differentiated."""
        if self.kind == "power":
            g = self.gamma
            return (1.0 - g) / g * torch.exp(z * g / (g - 1.0)) - K * torch.exp(z)
        if self.kind == "non_hara":
            return torch.exp(-3.0 * z) / 3.0 + torch.exp(-z) - K * torch.exp(z)
        raise NotImplementedError("custom utilities only have a numeric dual")


def numeric_dual_utility(utility: UtilityFamily, K: float, y: float,
                         log_bracket=(-40.0, 40.0), tol: float = 1e-13) -> float:
    """``sup_{x>K} U(x-K) - x y`` by golden-section search over ``log(x-K)``.

    The objective is concave in ``x - K``, hence unimodal in its logarithm.
    """
    if y <= 0:
        raise ValueError(f"dual utility needs y > 0, got {y}")

    def neg(s):
        w = np.exp(s)
        return -(float(utility(w)) - (K + w) * y)

    # coarse scan so the golden bracket contains the maximiser
    grid = np.linspace(*log_bracket, 801)
    vals = np.array([neg(s) for s in grid])
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    s_star = optimize.golden(neg, brack=(lo, grid[i], hi), tol=tol) if 0 < i < len(grid) - 1 \
        else grid[i]
    return -neg(s_star)


def dual_utility(utility: UtilityFamily, K: float, y):
    """Evaluate ``U~_K(y)``; closed form when available, numeric otherwise."""
    y_arr = np.asarray(y, dtype=float)
    if np.any(~(y_arr > 0)):
        raise ValueError("dual utility is only defined for y > 0")
    if utility.has_closed_form_dual():
        return utility.dual(y_arr, K)
    out = np.vectorize(lambda v: numeric_dual_utility(utility, K, v))(y_arr)
    return out if out.ndim else float(out)
