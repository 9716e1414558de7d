"""Lattice oracles and comparison statistics.

The trees here are deliberately independent of the neural pipeline: they
only share the market parameters and the closed-form dual utilities.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .exceptions import ContractError, ParameterError, StepCountError
from .problems import AmericanPutSpec, DualProblemSpec

__all__ = [
    "TreeSpec",
    "BenchmarkReport",
    "btm_optimal_stopping",
    "btm_values",
    "dual_tree_spec",
    "btm_dual_values",
    "btm_dual_grid",
    "btm_primal",
    "reduce_product_put",
    "compare",
    "format_table1",
    "format_table2",
]

P_MARGIN = 1e-9


@dataclass(frozen=True)
class TreeSpec:
    """Recombining additive lattice for a log-state with constant coefficients.

    Parameters
    ----------
    n_steps : int
    drift : float
        Drift of the log-state per unit time.
    volatility : float
        Volatility of the log-state per square-root time.
    discount : float
        Continuous discount rate.
    payoff : callable
        Vectorised payoff of the log-state.
    american : bool
        Early exercise allowed at every node when True.
    """

    n_steps: int
    drift: float
    volatility: float
    discount: float
    payoff: Callable = field(compare=False)
    american: bool = True

    def __post_init__(self):
        if int(self.n_steps) < 1:
            raise ParameterError("a tree needs at least one step")
        if not (self.volatility > 0):
            raise ParameterError("tree volatility must be positive")

    def with_steps(self, n: int) -> "TreeSpec":
        return TreeSpec(n, self.drift, self.volatility, self.discount, self.payoff, self.american)

    def european(self) -> "TreeSpec":
        return TreeSpec(self.n_steps, self.drift, self.volatility, self.discount,
                        self.payoff, False)


def _branch_probability(spec: TreeSpec, dt: float) -> float:
    p = 0.5 + 0.5 * (spec.drift / spec.volatility) * math.sqrt(dt)
    if not (P_MARGIN < p < 1.0 - P_MARGIN):
        raise StepCountError(
            f"branch probability {p:.6g} outside (0, 1); increase n_steps above {spec.n_steps}")
    return p


def btm_values(spec: TreeSpec, state0, T: float) -> np.ndarray:
    """Root values of trees started at each entry of ``state0`` over ``[0, T]``."""
    z0 = np.atleast_1d(np.asarray(state0, dtype=float))
    if T <= 0:
        return np.asarray(spec.payoff(z0), dtype=float)
    n = int(spec.n_steps)
    dt = T / n
    dz = spec.volatility * math.sqrt(dt)
    p = _branch_probability(spec, dt)
    disc = math.exp(-spec.discount * dt)
    pu, pd = disc * p, disc * (1.0 - p)
    # payoff on the full lattice k = -n..n, shape (R, 2n+1)
    k = np.arange(-n, n + 1)
    lattice = z0[:, None] + k[None, :] * dz
    pay = np.asarray(spec.payoff(lattice.ravel()), dtype=float).reshape(lattice.shape)
    # step m has nodes k = -m, -m+2, ..., m  ->  column offset n + k
    v = pay[:, 0::2].copy()
    for m in range(n - 1, -1, -1):
        v = pu * v[:, 1:] + pd * v[:, :-1]
        if spec.american:
            np.maximum(v, pay[:, n - m:n + m + 1:2], out=v)
    return v[:, 0]


def btm_optimal_stopping(spec: TreeSpec, state0, T: float):
    """Optimal-stopping value at the root of the lattice.

    Returns a float for a scalar ``state0`` and an array otherwise.
    """
    out = btm_values(spec, state0, T)
    return float(out[0]) if np.ndim(state0) == 0 else out


def dual_tree_spec(spec: DualProblemSpec, n_steps: int = 2000, american: bool = True) -> TreeSpec:
    """Lattice for ``log Y`` with ``dY = (beta - r) Y dt - theta Y dW``."""
    theta = abs(spec.theta)
    drift = spec.beta - spec.r - 0.5 * spec.theta ** 2
    utility, K = spec.utility, spec.K
    return TreeSpec(n_steps, drift, theta, spec.beta,
                    lambda z: utility.dual(np.exp(z), K), american)


def btm_dual_values(spec: DualProblemSpec, t: float, y, n_steps: int = 2000) -> np.ndarray:
    """Dual value ``V~(t, y)`` from a tree over the remaining horizon ``T - t``."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return btm_values(dual_tree_spec(spec, n_steps), np.log(y), spec.T - t)


def btm_dual_grid(spec: DualProblemSpec, tau, z, n_steps: int = 2000) -> np.ndarray:
    """Transformed dual ``v(tau, z)`` on a tensor grid, shape ``(len(tau), len(z))``.

    Each time slice gets its own tree with ``n_steps`` scaled to the remaining
    horizon (at least 50 steps).
    """
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    out = np.empty((tau.size, z.size))
    for i, ti in enumerate(tau):
        frac = ti / spec.tau_max if spec.tau_max > 0 else 0.0
        n = max(50, int(round(n_steps * frac)))
        out[i] = btm_values(dual_tree_spec(spec, n), z, 2.0 * ti / spec.theta ** 2)
    return out


def btm_primal(spec: DualProblemSpec, t: float, x, n_steps: int = 2000, n_grid: int = 200,
               y_bracket=(0.2, 10.0), tol: float = 1e-12) -> dict:
    """Primal value ``V(t, x) = inf_y {V~(t, y) + x y}`` from tree dual values.

    Tree values on a log-spaced ``y`` grid; centred differences locate the
    cell where ``d/dy V~ + x`` changes sign; bisection on the derivative of a
    cubic-spline interpolant (in ``log y``) refines ``y*`` inside that cell.

    Returns a dict with arrays ``V``, ``y_star`` and boolean ``edge`` flags
    (minimiser at the bracket edge: widen the bracket).
    """
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    ygrid = np.geomspace(y_bracket[0], y_bracket[1], n_grid)
    zgrid = np.log(ygrid)
    vals = btm_dual_values(spec, t, ygrid, n_steps)
    spline = CubicSpline(zgrid, vals)
    dspline = spline.derivative()
    # centred differences on the grid, in y
    dv_dy = np.gradient(vals, zgrid) / ygrid

    V = np.empty_like(xs)
    ys = np.empty_like(xs)
    edge = np.zeros(xs.shape, dtype=bool)
    for i, xi in enumerate(xs):
        h = dv_dy + xi
        sign_change = np.nonzero((h[:-1] < 0) & (h[1:] >= 0))[0]
        if sign_change.size == 0:
            j = int(np.argmin(vals + xi * ygrid))
            edge[i] = True
            ys[i] = ygrid[j]
            V[i] = vals[j] + xi * ygrid[j]
            continue
        j = int(sign_change[0])
        lo, hi = zgrid[max(j - 1, 0)], zgrid[min(j + 2, n_grid - 1)]

        def dobj(zz):
            return math.exp(-zz) * float(dspline(zz)) + xi

        if dobj(lo) > 0 or dobj(hi) < 0:
            lo, hi = zgrid[0], zgrid[-1]
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if dobj(mid) < 0:
                lo = mid
            else:
                hi = mid
        zs = 0.5 * (lo + hi)
        ys[i] = math.exp(zs)
        V[i] = float(spline(zs)) + xi * ys[i]
    return {"V": V, "y_star": ys, "edge": edge}


def reduce_product_put(spec: AmericanPutSpec, n_steps: int = 10_000) -> tuple[TreeSpec, float]:
    """Exact 1-D reduction of the product-payoff put.

    ``Z = sum_i log S^i`` is a Brownian motion with drift; returns the tree
    for ``Z`` and its initial value.
    """
    drift = float(np.sum(spec.r - spec.delta - 0.5 * spec.sigma ** 2))
    vol = float(math.sqrt(spec.covariance.sum()))
    K = spec.K
    tree = TreeSpec(n_steps, drift, vol, spec.r, lambda z: np.maximum(K - np.exp(z), 0.0), True)
    return tree, float(np.log(spec.s0).sum())


@dataclass
class BenchmarkReport:
    """Per-point comparison against a benchmark, with summary statistics."""

    x: np.ndarray
    values: np.ndarray
    benchmarks: np.ndarray
    rel_diff: np.ndarray
    mean_abs_rel_diff: float
    std_rel_diff: float
    method: str = ""
    timing: dict = field(default_factory=dict)

    def records(self):
        return [
            {"x": float(a), "V_method": float(v), "V_benchmark": float(b), "rel_diff": float(r)}
            for a, v, b, r in zip(self.x, self.values, self.benchmarks, self.rel_diff)
        ]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["method", "x", "V_method", "V_benchmark", "rel_diff"])
            w.writeheader()
            for rec in self.records():
                w.writerow({"method": self.method, **rec})


def compare(values: Sequence[float], benchmarks: Sequence[float], x=None,
            method: str = "", timing: Optional[dict] = None) -> BenchmarkReport:
    """Relative differences ``(v - b) / b`` and their mean-abs / sample std."""
    v = np.asarray(values, dtype=float).ravel()
    b = np.asarray(benchmarks, dtype=float).ravel()
    if v.shape != b.shape:
        raise ContractError(f"length mismatch: {v.size} values vs {b.size} benchmarks")
    if v.size == 0:
        raise ContractError("nothing to compare")
    if np.any(b == 0):
        raise ZeroDivisionError("relative difference undefined for a zero benchmark")
    rel = (v - b) / b
    std = float(np.std(rel, ddof=1)) if rel.size > 1 else 0.0
    xs = np.arange(v.size, dtype=float) if x is None else np.asarray(x, dtype=float).ravel()
    return BenchmarkReport(xs, v, b, rel, float(np.mean(np.abs(rel))), std, method, dict(timing or {}))


def format_table1(rows: dict[str, dict]) -> str:
    """Text table: one line per (utility, method) with percentages and timings.

    ``rows`` maps ``"utility/method"`` to a dict with keys ``report``
    (:class:`BenchmarkReport`), ``train_time`` and ``eval_ms``.
    """
    head = f"{'Utility':<10} {'Method':<14} {'Mean Abs. Rel. Diff. (%)':>26} " \
           f"{'Std Rel. Diff. (%)':>20} {'Training Time (s)':>18} {'Eval Time/Point (ms)':>21}"
    lines = [head, "-" * len(head)]
    for key, row in rows.items():
        utility, method = key.split("/", 1)
        rep = row["report"]
        tt = row.get("train_time")
        tt_s = "-" if tt is None else f"{tt:.2f}"
        lines.append(f"{utility:<10} {method:<14} {100 * rep.mean_abs_rel_diff:>26.6f} "
                     f"{100 * rep.std_rel_diff:>20.6f} {tt_s:>18} {row.get('eval_ms', float('nan')):>21.1f}")
    return "\n".join(lines)


def format_table2(results: dict[int, dict]) -> str:
    """Text table of ``mean +- std`` prices per dimension next to references."""
    dims = sorted(results)
    head = f"{'Dimension d':<12}" + "".join(f"{d:>22}" for d in dims)
    nn = f"{'NN':<12}" + "".join(
        f"{results[d]['mean']:>12.5f}±{results[d]['std']:<9.5f}" for d in dims)
    ref = f"{'Reference':<12}" + "".join(f"{results[d]['reference']:>22.6g}" for d in dims)
    lines = [head, "-" * len(head), nn, ref]
    if all("tree" in results[d] for d in dims):
        lines.append(f"{'Tree (1-D)':<12}" + "".join(f"{results[d]['tree']:>22.6f}" for d in dims))
    return "\n".join(lines)
