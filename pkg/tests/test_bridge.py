import math

import numpy as np
import pytest

import duallab as dl
from duallab.bsde import AdjointTriple

from conftest import make_ensemble


def merton_primal(base_model, ens, log_pair, mode="analytic"):
    return dl.solve_primal_search(base_model, log_pair, 1.0, [1.25], ens,
                                  adjoint_mode=mode)


def test_primal_to_dual_analytic(base_model, base_ens_5k, log_pair):
    sol = merton_primal(base_model, base_ens_5k, log_pair)
    control, y, report = dl.primal_to_dual(sol)
    assert np.allclose(control.theta0, -0.25, atol=1e-14)
    assert y == pytest.approx(1.0, abs=1e-14)  # p1(0) = U'(x)/1 with x = 1
    assert report.adjoint_mode == "analytic"
    assert report["process_link"]["max_abs"] < 1e-12
    assert report["terminal_link"]["max_abs"] < 1e-12
    assert report["constraint"]["max_abs"] <= 1e-12


def test_primal_to_dual_static_bridge(log_pair):
    flat = dl.MarketModel(drift=0.0, vol=0.2, horizon=1.0)
    ens = make_ensemble(flat, n_paths=1_000, seed=81)
    sol = dl.solve_primal_search(flat, log_pair, 2.0, [0.0], ens, adjoint_mode="analytic")
    control, y, report = dl.primal_to_dual(sol)
    assert np.all(control.theta0 == 0.0)
    assert y == pytest.approx(log_pair.u_prime(2.0), abs=1e-15)
    assert report["process_link"]["max_abs"] < 1e-14


def test_primal_to_dual_regression_tolerance(base_model, base_ens_50k, log_pair):
    # max-pathwise tolerances need the claim-adapted basis: polynomials in the
    # marginal-utility channel put the conditional expectation in the span
    basis = dl.RegressionBasis(degree=1, channels=("F",), transform="raw")
    sol = dl.solve_primal_search(base_model, log_pair, 1.0, [1.25], base_ens_50k,
                                 adjoint_mode="regression", basis=basis)
    control, y, report = dl.primal_to_dual(sol)
    assert report["process_link"]["max_rel"] < 0.05
    assert report["constraint"]["max_abs"] <= 1e-12


def test_dual_to_primal_analytic(base_model, base_ens_5k, log_pair):
    dual = dl.solve_dual_search(base_model, log_pair, 1.0, base_ens_5k,
                                adjoint_mode="analytic", replicate=False)
    strategy, x0, report = dl.dual_to_primal(dual)
    assert x0 == pytest.approx(1.0, abs=1e-14)
    assert dl.bridged_fraction(dual) == pytest.approx(1.25, abs=1e-12)
    assert report["process_link"]["max_abs"] < 1e-12
    assert report["terminal_link"]["max_abs"] < 1e-12


def test_dual_to_primal_constant_claim(log_pair):
    flat = dl.MarketModel(drift=0.0, vol=0.2, horizon=1.0)
    ens = make_ensemble(flat, n_paths=1_000, seed=83)
    dual = dl.solve_dual_search(flat, log_pair, 0.5, ens, adjoint_mode="analytic",
                                replicate=False)
    strategy, x0, report = dl.dual_to_primal(dual)
    assert np.all(np.asarray(strategy.values) == 0.0)
    assert x0 == pytest.approx(2.0, abs=1e-14)  # -V'(y) = 1/y


def test_round_trip_recovers_fraction(base_model, base_ens_5k, log_pair):
    primal = merton_primal(base_model, base_ens_5k, log_pair)
    control, y, _ = dl.primal_to_dual(primal)
    dual = dl.evaluate_dual_scenario(base_model, log_pair, control, base_ens_5k,
                                     adjoint_mode="analytic")
    assert dl.bridged_fraction(dual) == pytest.approx(1.25, abs=1e-12)
    _, x0, _ = dl.dual_to_primal(dual)
    assert x0 == pytest.approx(1.0, abs=1e-12)


def test_robust_primal_to_dual(base_model, base_ens_5k, log_pair, quad_penalty):
    sol = dl.solve_robust_saddle(base_model, log_pair, quad_penalty, 1.0,
                                 [0.625], [-0.125], base_ens_5k,
                                 adjoint_mode="analytic")
    control, mu, y, report = dl.robust_primal_to_dual(sol)
    assert mu == -0.125
    assert np.allclose(control.theta0, -0.125, atol=1e-14)  # -(b/sigma + mu)
    assert y == pytest.approx(1.0, abs=1e-13)
    assert report["process_link"]["max_abs"] < 1e-12
    assert report["terminal_link"]["max_abs"] < 1e-12
    assert np.max(np.abs(dl.elmm_residual(base_model, base_ens_5k.grid, control))) <= 1e-12


def test_robust_zero_drift_bridge_is_trivial(log_pair, quad_penalty):
    flat = dl.MarketModel(drift=0.0, vol=0.2, horizon=1.0)
    ens = make_ensemble(flat, n_paths=1_000, seed=85)
    sol = dl.solve_robust_saddle(flat, log_pair, quad_penalty, 1.0, [0.0], [0.0], ens,
                                 adjoint_mode="analytic")
    control, mu, y, _ = dl.robust_primal_to_dual(sol)
    assert mu == 0.0 and np.all(control.theta0 == 0.0)


def test_robust_primal_to_dual_regression_tolerance(base_model, base_ens_50k,
                                                    log_pair, quad_penalty):
    basis = dl.RegressionBasis(degree=1, channels=("F",), transform="raw")
    sol = dl.solve_robust_saddle(base_model, log_pair, quad_penalty, 1.0,
                                 [0.625], [-0.125], base_ens_50k, basis=basis)
    control, mu, y, report = dl.robust_primal_to_dual(sol)
    assert report["process_link"]["max_rel"] < 0.05


def test_robust_dual_to_primal(base_model, base_ens_5k, log_pair, quad_penalty):
    dual = dl.solve_robust_dual(base_model, log_pair, quad_penalty, 1.0, base_ens_5k,
                                mu_values=[-0.125], adjoint_mode="analytic")
    strategy, mu, x0, report = dl.robust_dual_to_primal(dual)
    assert mu == -0.125
    assert dl.bridged_fraction(dual) == pytest.approx(0.625, abs=1e-12)
    assert x0 == pytest.approx(1.0, abs=1e-13)
    assert report["process_link"]["max_abs"] < 1e-12


def test_robust_round_trip(base_model, base_ens_5k, log_pair, quad_penalty):
    primal = dl.solve_robust_saddle(base_model, log_pair, quad_penalty, 1.0,
                                    [0.625], [-0.125], base_ens_5k,
                                    adjoint_mode="analytic")
    control, mu, y, _ = dl.robust_primal_to_dual(primal)
    dual = dl.solve_robust_dual(base_model, log_pair, quad_penalty, y, base_ens_5k,
                                mu_values=[mu], adjoint_mode="analytic")
    _, mu_back, x_back, _ = dl.robust_dual_to_primal(dual)
    assert mu_back == mu
    assert dl.bridged_fraction(dual) == pytest.approx(0.625, abs=1e-12)
    assert x_back == pytest.approx(1.0, abs=1e-12)


def test_product_identity_exact_updates(base_model, base_ens_5k, log_pair):
    grid = base_ens_5k.grid
    wealth = dl.wealth_paths(base_model, base_ens_5k, dl.Strategy.fraction(1.25), 1.0)
    control = dl.unique_scenario_no_jumps(base_model, grid, 1.0)
    density = dl.density_paths(base_ens_5k, control)
    assert dl.verify_product_identity(wealth, density, 1.0, 1.0) < 1e-12


def test_product_identity_euler_deviation_shrinks_with_steps(base_model):
    devs = []
    for steps in (25, 50, 100, 200):
        ens = make_ensemble(base_model, n_steps=steps, n_paths=4_000, seed=87)
        grid = ens.grid
        control = dl.unique_scenario_no_jumps(base_model, grid, 1.0)
        wealth = dl.wealth_paths(base_model, ens, dl.Strategy.fraction(1.25), 1.0,
                                 scheme="euler")
        density = dl.density_paths(ens, control, scheme="euler")
        devs.append(dl.verify_product_identity(wealth, density, 1.0, 1.0))
    assert devs[-1] < devs[0]
    # the deviation is a quadratic-variation martingale error, so the log-log
    # slope sits near one half rather than the order-one bias rate
    slope = np.polyfit(np.log([25, 50, 100, 200]), np.log(devs), 1)[0]
    assert -1.3 <= slope <= -0.3


def test_bridge_violation_on_bad_jump_ratio(jump_model, log_pair):
    ens = make_ensemble(jump_model, n_paths=500, seed=89)
    wealth = dl.wealth_paths(jump_model, ens, dl.Strategy.fraction(1.0), 1.0)
    bad = AdjointTriple(
        p=np.ones((500, 101)),
        q=np.zeros((500, 100)),
        r=np.full((500, 100, 1), -1.2),  # ratio r/p below -1
        mode="analytic",
    )
    sol = dl.PrimalSolution(
        model=jump_model, ensemble=ens, utility=log_pair, x0=1.0, pi=1.0,
        strategy=dl.Strategy.fraction(1.0), value=0.0, se=0.0,
        pi_values=np.array([1.0]), candidate_values=np.zeros(1),
        candidate_se=np.zeros(1), wealth=wealth, adjoints=bad,
    )
    with pytest.raises(dl.BridgeViolationError):
        dl.primal_to_dual(sol)


def test_dual_to_primal_rejects_degenerate_vol(log_pair):
    model = dl.MarketModel(
        drift=0.05, vol=lambda t: 0.0 if t < 0.5 else 0.2,
        jump_marks=(0.1,), jump_intensities=(1.0,), horizon=1.0,
    )
    grid = dl.TimeGrid(100, 1.0)
    ens = make_ensemble(model, n_paths=500, seed=91)
    theta_star = (-5.5 + math.sqrt(5.5**2 - 2.0)) / 2.0
    control = dl.scenario_from_theta1(model, grid, np.array([theta_star]), 1.0)
    dual = dl.evaluate_dual_scenario(model, log_pair, control, ens,
                                     adjoint_mode="analytic")
    with pytest.raises(dl.BridgeViolationError, match="sigma"):
        dl.dual_to_primal(dual)
