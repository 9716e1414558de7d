"""Primal values from a surrogate of the transformed dual value function.

A surrogate ``f(tau, z)`` of the transformed dual VI gives the dual value
``w(t, y) = f(theta^2 (T - t) / 2, log y)`` and the primal value

    V(t, x) = inf_y { w(t, y) + x y }

which is recovered either by bisection on ``dw/dy + x`` (using the exact
surrogate derivative) or by brute force on a log-spaced ``y`` grid.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .exceptions import ExtrapolationError, ParameterError
from .problems import DualProblemSpec
from .utility import UtilityFamily, dual_utility, numeric_dual_utility

__all__ = [
    "UtilityFamily",
    "PrimalRecovery",
    "dual_utility",
    "numeric_dual_utility",
    "dual_value",
    "primal_bisection",
    "primal_grid",
    "recover",
    "write_recovery_csv",
    "RECOVERY_COLUMNS",
]

RECOVERY_COLUMNS = ("t", "x", "method", "y_star", "V_n", "fallback_flag")


@dataclass(frozen=True)
class PrimalRecovery:
    """How to minimise ``w(t, y) + x y`` over ``y``.

    ``y_bracket`` defaults to the surrogate's ``z`` box mapped through
    ``exp``; an explicit bracket is intersected with that box.
    ``scan_points`` sets the coarse derivative scan used to detect
    non-convex surrogates (more than one sign change sends the point to the
    grid method).
    """

    method: str = "bisection"
    n_points: int = 200
    y_bracket: Optional[tuple] = None
    tol_bisect: float = 1e-10
    tol_derivative: float = 1e-12
    max_iter: int = 200
    scan_points: int = 64

    def __post_init__(self):
        if self.method not in ("bisection", "grid"):
            raise ParameterError(f"unknown recovery method {self.method!r}")
        if self.n_points < 1:
            raise ParameterError("the grid needs at least one point")
        if not (self.tol_bisect > 0):
            raise ParameterError("tol_bisect must be positive")
        if self.y_bracket is not None:
            lo, hi = self.y_bracket
            if not (0 < lo < hi):
                raise ParameterError(f"y bracket must satisfy 0 < y_lo < y_hi, got {self.y_bracket}")

    def z_bracket(self, spec: DualProblemSpec) -> tuple[float, float]:
        lo, hi = spec.z_lo, spec.z_hi
        if self.y_bracket is not None:
            lo = max(lo, math.log(self.y_bracket[0]))
            hi = min(hi, math.log(self.y_bracket[1]))
        if lo >= hi:
            raise ExtrapolationError("y bracket does not intersect the surrogate's z box")
        return lo, hi


def _points(spec: DualProblemSpec, t, z):
    t = np.asarray(t, dtype=float)
    z = np.asarray(z, dtype=float)
    t, z = np.broadcast_arrays(t, z)
    tol = 1e-12 * max(1.0, abs(spec.z_lo), abs(spec.z_hi))
    if np.any(z < spec.z_lo - tol) or np.any(z > spec.z_hi + tol):
        raise ExtrapolationError(
            f"log y outside the training box [{spec.z_lo}, {spec.z_hi}]; refusing to extrapolate")
    if np.any(t < -1e-12) or np.any(t > spec.T + 1e-12):
        raise ExtrapolationError(f"t outside [0, {spec.T}]")
    tau = spec.to_tau(t)
    return np.stack([tau.ravel(), z.ravel()], axis=1), t.shape


def _eval(model, pts, derivative: bool):
    X = torch.as_tensor(pts, dtype=model.config.torch_dtype)
    with torch.no_grad():
        if not derivative:
            return model(X).double().numpy(), None
        j = model.jet(X, hessian=False)
        return j.value.double().numpy(), j.grad[:, 0].double().numpy()


def dual_value(model, spec: DualProblemSpec, t, y, derivative: bool = False):
    """``w(t, y)`` and, optionally, ``dw/dy = exp(-z) df/dz``.

    Raises :class:`ExtrapolationError` when ``log y`` or ``t`` leaves the box.
    """
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ExtrapolationError("dual variable must be positive")
    z = np.log(y)
    pts, shape = _points(spec, t, z)
    val, dz = _eval(model, pts, derivative)
    val = val.reshape(shape)
    if not derivative:
        return val if val.ndim else float(val)
    dy = (dz * np.exp(-pts[:, 1])).reshape(shape)
    if val.ndim == 0:
        return float(val), float(dy)
    return val, dy


def _scan_sign_changes(model, spec, t, x, zlo, zhi, n):
    zs = np.linspace(zlo, zhi, n)
    pts, _ = _points(spec, np.full(n, t), zs)
    _, dz = _eval(model, pts, True)
    h = dz * np.exp(-zs)
    hx = h[None, :] + np.asarray(x)[:, None]
    s = np.sign(hx)
    changes = np.count_nonzero(s[:, 1:] != s[:, :-1], axis=1)
    return changes, hx


def primal_grid(model, spec: DualProblemSpec, t: float, x, rec: PrimalRecovery = PrimalRecovery()) -> dict:
    """Minimise ``w(t, y_i) + x y_i`` over a log-spaced grid of ``rec.n_points``."""
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    zlo, zhi = rec.z_bracket(spec)
    zs = np.array([zlo]) if rec.n_points == 1 else np.linspace(zlo, zhi, rec.n_points)
    ys = np.exp(zs)
    pts, _ = _points(spec, np.full(zs.size, float(t)), zs)
    w, _ = _eval(model, pts, False)
    obj = w[None, :] + xs[:, None] * ys[None, :]
    idx = np.argmin(obj, axis=1)
    return {"V": obj[np.arange(xs.size), idx], "y_star": ys[idx],
            "fallback": np.zeros(xs.size, dtype=bool), "method": "grid",
            "edge": (idx == 0) | (idx == zs.size - 1)}


def primal_bisection(model, spec: DualProblemSpec, t: float, x,
                     rec: PrimalRecovery = PrimalRecovery()) -> dict:
    """Root of ``dw/dy(t, y) + x`` by bisection in ``log y``.

    Points whose bracket has no sign change, or whose coarse scan shows
    several sign changes (non-convex surrogate), fall back to
    :func:`primal_grid` and are flagged in ``fallback``.
    """
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    zlo, zhi = rec.z_bracket(spec)
    changes, _ = _scan_sign_changes(model, spec, float(t), xs, zlo, zhi, max(rec.scan_points, 2))
    ok = changes == 1
    lo = np.full(xs.size, zlo)
    hi = np.full(xs.size, zhi)
    # h(z) = dw/dy + x is increasing in z when w is convex in y
    for _ in range(rec.max_iter):
        active = ok & (hi - lo > rec.tol_bisect)
        if not active.any():
            break
        mid = 0.5 * (lo + hi)
        pts, _ = _points(spec, np.full(int(active.sum()), float(t)), mid[active])
        _, dz = _eval(model, pts, True)
        h = dz * np.exp(-mid[active]) + xs[active]
        idx = np.nonzero(active)[0]
        below = h < 0
        lo[idx[below]] = mid[active][below]
        hi[idx[~below]] = mid[active][~below]
        small = np.abs(h) < rec.tol_derivative
        lo[idx[small]] = hi[idx[small]] = mid[active][small]
    zs = 0.5 * (lo + hi)
    ys = np.exp(zs)
    pts, _ = _points(spec, np.full(xs.size, float(t)), zs)
    w, _ = _eval(model, pts, False)
    V = w + xs * ys
    fallback = ~ok
    if fallback.any():
        g = primal_grid(model, spec, t, xs[fallback], rec)
        V[fallback] = g["V"]
        ys[fallback] = g["y_star"]
    return {"V": V, "y_star": ys, "fallback": fallback, "method": "bisection",
            "sign_changes": changes}


def recover(model, spec: DualProblemSpec, t: float, x, rec: PrimalRecovery = PrimalRecovery()) -> dict:
    if rec.method == "grid":
        return primal_grid(model, spec, t, x, rec)
    return primal_bisection(model, spec, t, x, rec)


def write_recovery_csv(path, t, x, result: dict) -> Path:
    """Rows ``(t, x, method, y_star, V_n, fallback_flag)``."""
    path = Path(path)
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECOVERY_COLUMNS)
        for i, xi in enumerate(xs):
            w.writerow([repr(float(t)), repr(float(xi)), result["method"], repr(float(result["y_star"][i])),
                        repr(float(result["V"][i])), int(bool(result["fallback"][i]))])
    return path
