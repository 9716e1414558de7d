import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from nnvi.bench import (BenchmarkReport, TreeSpec, btm_dual_values, btm_optimal_stopping, btm_primal, compare,
                        dual_tree_spec, format_table1, format_table2, reduce_product_put)
from nnvi.exceptions import ContractError, ParameterError, StepCountError
from nnvi.problems import AmericanPutSpec, DualProblemSpec
from nnvi.utility import UtilityFamily

from conftest import MARKET, WEALTH


def put_tree(K=1.0, r=0.05, sigma=0.2, n=512):
    return TreeSpec(n, r - 0.5 * sigma ** 2, sigma, r, lambda z: np.maximum(K - np.exp(z), 0.0))


def bs_put(S, K, r, sigma, T):
    d1 = (math.log(S / K) + (r + 0.5 * sigma ** 2) * T) / (sigma * math.sqrt(T))
    d2 = d1 - sigma * math.sqrt(T)
    return K * math.exp(-r * T) * norm.cdf(-d2) - S * norm.cdf(-d1)


def test_constant_payoff_is_exercised_immediately():
    spec = TreeSpec(100, 0.03, 0.3, 0.05, lambda z: np.full_like(z, 2.5))
    assert btm_optimal_stopping(spec, 0.0, 1.0) == pytest.approx(2.5)


def test_near_deterministic_deep_itm_put():
    spec = TreeSpec(200, 0.0, 1e-8, 0.05, lambda z: np.maximum(1.0 - np.exp(z), 0.0))
    assert btm_optimal_stopping(spec, math.log(0.2), 1.0) == pytest.approx(0.8, abs=1e-6)


def test_step_count_error_for_coarse_tree():
    spec = TreeSpec(10, 0.05, 1e-8, 0.05, lambda z: z)
    with pytest.raises(StepCountError, match="increase n_steps"):
        btm_optimal_stopping(spec, 0.0, 1.0)


def test_european_tree_matches_black_scholes():
    v = btm_optimal_stopping(put_tree(n=4096).european(), 0.0, 1.0)
    assert v == pytest.approx(bs_put(1.0, 1.0, 0.05, 0.2, 1.0), abs=2e-5)


@pytest.mark.parametrize("d", [1, 5])
def test_tree_self_convergence(d):
    tree, z0 = reduce_product_put(AmericanPutSpec.symmetric(d))
    vals = [btm_optimal_stopping(tree.with_steps(2 ** k), z0, 1.0) for k in range(9, 14)]
    gaps = np.abs(np.diff(vals))
    assert np.all(np.diff(gaps) < 0)
    rich = [2 * b - a for a, b in zip(vals[:-1], vals[1:])]
    assert abs(rich[-1] - rich[-2]) < 5e-5 * abs(rich[-1])


@given(s0=st.floats(0.6, 1.5), sigma=st.floats(0.1, 0.5), r=st.floats(0.01, 0.1))
def test_american_dominates_european_and_payoff(s0, sigma, r):
    tree = put_tree(r=r, sigma=sigma, n=256)
    z0 = math.log(s0)
    am = btm_optimal_stopping(tree, z0, 1.0)
    eu = btm_optimal_stopping(tree.european(), z0, 1.0)
    assert am >= eu - 1e-14
    assert am >= max(1.0 - s0, 0.0) - 1e-14


def test_dual_tree_european_bound(power_spec):
    am = btm_values_pair = btm_dual_values(power_spec, 0.0, [0.5, 1.0, 2.0], 500)
    eu_spec = dual_tree_spec(power_spec, 500, american=False)
    from nnvi.bench import btm_values
    eu = btm_values(eu_spec, np.log([0.5, 1.0, 2.0]), power_spec.T)
    assert np.all(am >= eu - 1e-14)
    assert np.all(am >= power_spec.utility.dual(np.array([0.5, 1.0, 2.0]), 1.0) - 1e-14)


def test_reduction_constants():
    t1, z1 = reduce_product_put(AmericanPutSpec.symmetric(1))
    assert t1.drift == pytest.approx(0.03) and t1.volatility == pytest.approx(0.2) and z1 == 0.0
    t5, _ = reduce_product_put(AmericanPutSpec.symmetric(5))
    assert t5.drift == pytest.approx(0.15) and t5.volatility == pytest.approx(0.447214, abs=1e-6)
    assert t5.discount == 0.05


def test_reduction_reference_price_d1():
    tree, z0 = reduce_product_put(AmericanPutSpec.symmetric(1), n_steps=10_000)
    assert abs(btm_optimal_stopping(tree, z0, 1.0) - 0.060903) <= 5e-5


@pytest.mark.parametrize("rho", [0.0, 0.3])
def test_reduction_matches_monte_carlo(rho):
    d = 5
    spec = AmericanPutSpec.symmetric(d, rho=rho, sigma=[0.1, 0.15, 0.2, 0.25, 0.3], delta=0.01)
    tree, z0 = reduce_product_put(spec)
    rng = np.random.default_rng(0)
    n = 100_000
    chol = np.linalg.cholesky(spec.rho)
    W = rng.standard_normal((n, d)) @ chol.T
    logs = np.log(spec.s0) + (spec.r - spec.delta - 0.5 * spec.sigma ** 2) * spec.T \
        + spec.sigma * math.sqrt(spec.T) * W
    Z = logs.sum(axis=1)
    mean_se = Z.std() / math.sqrt(n)
    var_se = Z.var() * math.sqrt(2.0 / (n - 1))
    assert abs(Z.mean() - (z0 + tree.drift * spec.T)) <= 3 * mean_se
    assert abs(Z.var() - tree.volatility ** 2 * spec.T) <= 3 * var_se


def test_btm_primal_at_maturity_is_biconjugate(power_spec):
    r = btm_primal(power_spec, power_spec.T, [1.5, 2.0, 3.0], n_grid=400)
    assert np.allclose(r["V"], 2.0 * np.sqrt(np.array([0.5, 1.0, 2.0])), rtol=1e-6)
    assert not r["edge"].any()


def test_btm_primal_power():
    spec = DualProblemSpec(UtilityFamily.power(0.5), **MARKET)
    r = btm_primal(spec, 0.0, WEALTH)
    # stopping region: immediate exercise value U(x - K) = 2 sqrt(x - 1)
    assert r["V"][-1] == pytest.approx(2.0, abs=1e-6)
    assert np.all(r["V"] >= 2 * np.sqrt(WEALTH - 1) - 1e-6)
    assert np.all(np.diff(r["V"]) > 0)


def test_btm_primal_flags_edge():
    spec = DualProblemSpec(UtilityFamily.power(0.5), **MARKET)
    r = btm_primal(spec, spec.T, [1.01], y_bracket=(0.5, 2.0), n_steps=10)
    assert r["edge"][0]


def test_compare_examples():
    rep = compare([1.0, 2.0], [1.0, 2.1])
    assert rep.mean_abs_rel_diff == pytest.approx(0.0238095, abs=1e-7)
    assert rep.std_rel_diff == pytest.approx(0.0336718, abs=1e-7)
    same = compare([1.0, 3.0], [1.0, 3.0])
    assert same.mean_abs_rel_diff == 0.0 and same.std_rel_diff == 0.0


@given(vals=st.lists(st.floats(0.5, 2.0), min_size=2, max_size=10), c=st.floats(-100, 100))
def test_compare_scale_invariant(vals, c):
    if abs(c) < 1e-3:
        return
    b = np.linspace(1.0, 2.0, len(vals))
    r1 = compare(vals, b)
    r2 = compare(np.asarray(vals) * c, b * c)
    assert r2.mean_abs_rel_diff == pytest.approx(r1.mean_abs_rel_diff, rel=1e-12, abs=1e-15)
    assert r2.std_rel_diff == pytest.approx(r1.std_rel_diff, rel=1e-9, abs=1e-15)


def test_compare_errors():
    with pytest.raises(ZeroDivisionError):
        compare([1.0], [0.0])
    with pytest.raises(ContractError):
        compare([1.0, 2.0], [1.0])


def test_report_csv_and_summary_recomputable(tmp_path):
    rep = compare([1.0, 2.0, 3.3], [1.1, 2.0, 3.0], x=[1, 2, 3], method="NN")
    rep.to_csv(tmp_path / "r.csv")
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0] == "method,x,V_method,V_benchmark,rel_diff" and len(rows) == 4
    rel = np.array([r["rel_diff"] for r in rep.records()])
    assert np.mean(np.abs(rel)) == pytest.approx(rep.mean_abs_rel_diff)
    assert np.std(rel, ddof=1) == pytest.approx(rep.std_rel_diff)


def test_table_formats():
    rep = compare([1.0, 2.0], [1.0, 2.1])
    t1 = format_table1({"Power/NN Bisection": {"report": rep, "train_time": 12.0, "eval_ms": 3.0}})
    assert "Mean Abs. Rel. Diff." in t1 and "Power" in t1 and "2.380952" in t1
    t2 = format_table2({5: {"mean": 0.10693, "std": 0.00028, "reference": 0.10738}})
    assert "0.10693±0.00028" in t2 and "0.10738" in t2


def test_tree_spec_validation():
    with pytest.raises(ParameterError):
        TreeSpec(0, 0.0, 0.2, 0.05, lambda z: z)
    with pytest.raises(ParameterError):
        TreeSpec(10, 0.0, 0.0, 0.05, lambda z: z)
