import math
import warnings

import numpy as np
import pytest

import duallab as dl
from duallab.bsde import AdjointTriple

from conftest import make_ensemble


def test_constant_terminal_is_represented_exactly(base_model, base_ens_5k):
    terminal = np.full(base_ens_5k.n_paths, 3.25)
    triple = dl.martingale_representation(base_ens_5k, terminal)
    assert np.allclose(triple.p, 3.25, rtol=0, atol=1e-12)
    assert np.allclose(triple.q, 0.0, atol=1e-12)
    assert triple.r.shape[2] == 0


def test_brownian_terminal_has_unit_integrand(base_model, grid100):
    ens = make_ensemble(base_model, n_paths=50_000, seed=31)
    b_total = ens.brownian_increments.sum(axis=1)
    triple = dl.martingale_representation(
        ens, b_total + 5.0, basis=dl.RegressionBasis(degree=1)
    )
    # p(t) tracks 5 + B(t); q is identically one
    b_run = np.cumsum(ens.brownian_increments, axis=1)
    assert np.max(np.abs(triple.p[:, 1:-1] - (5.0 + b_run[:, :-1]))) < 0.1
    # fitted-integrand error, excluding the 1% leverage tails of the state
    # distribution where a linear fit's noise is amplified
    s = ens.channel("S")
    qerr = np.abs(triple.q - 1.0)
    for i in range(0, 100, 7):
        lo, hi = np.quantile(s[:, i], [0.01, 0.99])
        mask = (s[:, i] >= lo) & (s[:, i] <= hi)
        assert qerr[mask, i].max() < 0.05
    assert np.max(np.abs(triple.q.mean(axis=0) - 1.0)) < 0.05


def test_log_optimal_marginal_gives_constant_product(base_model, base_ens_50k, log_pair):
    wealth = dl.wealth_paths(base_model, base_ens_50k, dl.Strategy.fraction(1.25), 1.0)
    triple = dl.martingale_representation(
        base_ens_50k, log_pair.u_prime(wealth[:, -1]), state={"X": wealth}
    )
    product = triple.p * wealth
    dev = np.abs(product / product[:, :1] - 1.0)
    assert np.sqrt(np.mean(dev**2)) < 0.02


def test_zero_driver_matches_martingale_representation(base_model, base_ens_5k):
    terminal = base_ens_5k.channel("S")[:, -1]
    a = dl.martingale_representation(base_ens_5k, terminal)
    b = dl.solve_linear_bsde(base_ens_5k, terminal, driver=dl.DriverSpec.zero())
    assert np.array_equal(a.p, b.p) and np.array_equal(a.q, b.q)


def test_benchmark_initial_value_and_ratio(base_model, grid100, log_pair):
    # backward solve of the closed-form equation: p2(0) = 1/y, q2/p2 = b/sigma
    ens = make_ensemble(base_model, n_paths=25_000, seed=33)
    control = dl.unique_scenario_no_jumps(base_model, grid100, 1.0)
    density = dl.density_paths(ens, control)
    triple = dl.solve_linear_bsde(
        ens,
        log_pair.inverse_marginal(density[:, -1]),
        driver=dl.DriverSpec(q_coeff=0.25),
        state={"G": density},
    )
    assert abs(triple.p[:, 0].mean() - 1.0) < 0.02
    p_mean = triple.p[:, :-1].mean(axis=0)
    q_mean = triple.q.mean(axis=0)
    ratios = q_mean[10:90] / p_mean[10:90]
    assert np.max(np.abs(ratios - 0.25)) < 0.05


def test_path_doubling_reduces_benchmark_error(base_model, grid100, log_pair):
    errors = {}
    for n in (25_000, 50_000):
        ens = make_ensemble(base_model, n_paths=n, seed=37)
        control = dl.unique_scenario_no_jumps(base_model, grid100, 1.0)
        density = dl.density_paths(ens, control)
        triple = dl.solve_linear_bsde(
            ens,
            log_pair.inverse_marginal(density[:, -1]),
            driver=dl.DriverSpec(q_coeff=0.25),
            state={"G": density},
        )
        errors[n] = abs(triple.p[:, 0].mean() - 1.0)
    assert errors[50_000] <= 1.5 * errors[25_000]


def test_driver_free_means_are_time_constant(base_model, base_ens_50k, log_pair):
    wealth = dl.wealth_paths(base_model, base_ens_50k, dl.Strategy.fraction(1.25), 1.0)
    triple = dl.martingale_representation(
        base_ens_50k, log_pair.u_prime(wealth[:, -1]), state={"X": wealth}
    )
    means = triple.p.mean(axis=0)
    se = triple.p[:, -1].std(ddof=1) / math.sqrt(base_ens_50k.n_paths)
    assert np.max(np.abs(means - means[-1])) <= 3 * se
    # least squares with an intercept preserves the sample mean step by step
    assert np.max(np.abs(means - means[-1])) < 1e-10 * abs(means[-1])


def test_terminal_matched_pathwise(base_model, base_ens_5k):
    terminal = base_ens_5k.channel("S")[:, -1] ** 2
    triple = dl.martingale_representation(base_ens_5k, terminal)
    assert np.array_equal(triple.p[:, -1], terminal)


def test_near_singular_implicit_step_raises(base_model, base_ens_5k):
    terminal = base_ens_5k.channel("S")[:, -1]
    driver = dl.DriverSpec(p_coeff=-100.0)  # 1 + dt*cp = 0 at dt = 0.01
    with pytest.raises(ValueError, match="implicit step"):
        dl.solve_linear_bsde(base_ens_5k, terminal, driver=driver)


def test_rank_deficient_state_warns_but_fits(base_model, base_ens_5k):
    s = base_ens_5k.channel("S")
    with pytest.warns(RuntimeWarning, match="rank-deficient"):
        triple = dl.martingale_representation(
            base_ens_5k, s[:, -1], state={"S": s, "S2": s**2}
        )
    assert triple.diagnostics["rank_deficient"]
    assert np.all(np.isfinite(triple.p))


def test_residual_report_exact_triple(base_model, base_ens_5k):
    # p = 5 + B(t), q = 1, r empty satisfies the discrete equation exactly
    b_run = np.concatenate(
        [np.zeros((base_ens_5k.n_paths, 1)),
         np.cumsum(base_ens_5k.brownian_increments, axis=1)], axis=1
    )
    triple = AdjointTriple(
        p=5.0 + b_run,
        q=np.ones((base_ens_5k.n_paths, 100)),
        r=np.zeros((base_ens_5k.n_paths, 100, 0)),
        mode="analytic",
    )
    report = dl.bsde_residual_report(triple, base_ens_5k)
    assert report["pathwise_max"] < 1e-10
    assert report["max_residual"] < 1e-10


def test_residual_report_solved_triple_within_tolerance(base_model, grid100, log_pair):
    ens = make_ensemble(base_model, n_paths=20_000, seed=41)
    control = dl.unique_scenario_no_jumps(base_model, grid100, 1.0)
    density = dl.density_paths(ens, control)
    driver = dl.DriverSpec(q_coeff=0.25)
    triple = dl.solve_linear_bsde(
        ens, log_pair.inverse_marginal(density[:, -1]), driver=driver, state={"G": density}
    )
    report = dl.bsde_residual_report(triple, ens, driver=driver, state={"G": density})
    fit_rmse = np.mean([s["fit_rmse"] for s in triple.diagnostics["per_step"]])
    assert report["mean_residual"] <= fit_rmse / report["scale"]
    assert report["mean_residual"] < 0.05


def test_residual_report_detects_corrupted_q(base_model, grid100, log_pair):
    ens = make_ensemble(base_model, n_paths=20_000, seed=41)
    control = dl.unique_scenario_no_jumps(base_model, grid100, 1.0)
    density = dl.density_paths(ens, control)
    driver = dl.DriverSpec(q_coeff=0.25)
    triple = dl.solve_linear_bsde(
        ens, log_pair.inverse_marginal(density[:, -1]), driver=driver, state={"G": density}
    )
    clean = dl.bsde_residual_report(triple, ens, driver=driver, state={"G": density})
    corrupted = AdjointTriple(p=triple.p, q=triple.q + 1.0, r=triple.r, mode=triple.mode)
    dirty = dl.bsde_residual_report(corrupted, ens, driver=driver, state={"G": density})
    assert dirty["max_residual"] >= 10 * clean["max_residual"]
    assert dirty["mean_residual"] >= 10 * clean["mean_residual"]
    assert dirty["pathwise_max"] > clean["pathwise_max"]


def test_diagnostics_json_roundtrip(base_model, base_ens_5k):
    import json

    terminal = base_ens_5k.channel("S")[:, -1]
    triple = dl.martingale_representation(base_ens_5k, terminal)
    payload = json.loads(dl.diagnostics_json(triple))
    assert payload["mode"] == "regression"
    assert len(payload["per_step"]) == 100
    assert {"step", "t", "rank", "cond", "fit_rmse"} <= set(payload["per_step"][0])


def test_rejects_non_finite_terminal(base_ens_5k):
    terminal = np.full(base_ens_5k.n_paths, np.nan)
    with pytest.raises(ValueError, match="finite"):
        dl.martingale_representation(base_ens_5k, terminal)
