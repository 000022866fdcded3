"""Primal problem: maximize expected utility of terminal wealth.

Closed form for the log/no-jump case; otherwise a grid search over constant
fractions with common random numbers and control variates.  First-order
optimality is checked two ways: through the adjoint constraint
b*p1 + sigma*q1 + sum gamma*r1*nu = 0 and through a finite-difference
directional derivative of the objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bsde import AdjointTriple, RegressionBasis, martingale_representation
from .market import (
    AdmissibilityError,
    MarketModel,
    PathEnsemble,
    Strategy,
    eval_on_grid,
    terminal_log_wealth,
    wealth_paths,
    _mu_on_grid,
)
from .mc import cv_mean
from .preferences import UtilityPair


@dataclass
class PrimalSolution:
    """Optimal (within the searched family) strategy with diagnostics attached."""

    model: MarketModel
    ensemble: PathEnsemble
    utility: UtilityPair
    x0: float
    pi: float
    strategy: Strategy
    value: float
    se: float
    pi_values: np.ndarray
    candidate_values: np.ndarray
    candidate_se: np.ndarray
    excluded: list = field(default_factory=list)
    mu: object = None
    wealth: np.ndarray | None = None
    adjoints: AdjointTriple | None = None
    foc: dict | None = None


def merton_log_closed_form(model: MarketModel) -> Strategy:
    """Optimal fraction b(t)/sigma(t)^2 for log utility in a no-jump market."""
    if model.n_marks:
        raise ValueError("closed form requires a no-jump market")
    b, s = model.drift, model.vol
    if callable(b) or callable(s):
        bf, sf = (b if callable(b) else lambda t, _v=b: _v), (s if callable(s) else lambda t, _v=s: _v)
        return Strategy.fraction(lambda t, x=None, spot=None: bf(t) / sf(t) ** 2)
    return Strategy.fraction(b / s**2)


def analytic_log_adjoints(
    model: MarketModel,
    ensemble: PathEnsemble,
    wealth: np.ndarray,
    pi: float,
    mu=None,
) -> AdjointTriple:
    """Closed-form adjoints for log utility under a constant fraction.

    With U' = 1/x the conditional expectation of U'(X(T)) is C(t)/X(t) with a
    deterministic tail factor; the integrands follow by differentiating the
    exponential update:  q1 = -pi*sigma*p1 and r1_k = p1*((1+pi*gamma_k)^{-1}-1).
    """
    grid = ensemble.grid
    dt = grid.dt
    b = model.drift_on(grid) + _mu_on_grid(mu, grid) * model.vol_on(grid)
    s = model.vol_on(grid)
    gam = model.jump_sizes_on(grid)
    nu = model.intensities
    rate = pi**2 * s**2 - pi * b
    if model.n_marks:
        rate = rate + pi * (gam @ nu) + ((1.0 / (1.0 + pi * gam) - 1.0) @ nu)
    # tail factor C(t_i) = exp(sum_{j>=i} rate_j dt), C(T) = 1
    tail = np.concatenate([np.cumsum((rate * dt)[::-1])[::-1], [0.0]])
    p = np.exp(tail)[None, :] / wealth
    q = -pi * s[None, :] * p[:, :-1]
    r = np.zeros((ensemble.n_paths, grid.n_steps, model.n_marks))
    if model.n_marks:
        r = (1.0 / (1.0 + pi * gam) - 1.0)[None, :, :] * p[:, :-1, None]
    return AdjointTriple(p, q, r, mode="analytic", diagnostics={"family": "log-constant-pi"})


def solve_primal_search(
    model: MarketModel,
    utility: UtilityPair,
    x0: float,
    pi_values,
    ensemble: PathEnsemble,
    mu=None,
    adjoint_mode: str = "regression",
    control_variates: bool = True,
    basis: RegressionBasis | None = None,
) -> PrimalSolution:
    """Grid search over constant fractions, sharing one ensemble across candidates.

    Ties are broken toward smaller |pi|.  Candidates that violate
    1 + pi*gamma > 0 are excluded and reported.  The winner gets adjoints from
    the martingale representation of U'(X(T)) (or the log closed form).
    """
    pi_values = np.asarray(list(pi_values), dtype=float)
    controls = ensemble.terminal_controls() if control_variates else None
    values = np.full(pi_values.shape, -np.inf)
    ses = np.zeros(pi_values.shape)
    excluded = []
    for j, pi in enumerate(pi_values):
        try:
            ln_xt = terminal_log_wealth(model, ensemble, pi, x0, mu=mu)
        except AdmissibilityError as exc:
            excluded.append({"pi": float(pi), "reason": str(exc)})
            continue
        values[j], ses[j] = cv_mean(utility.u(np.exp(ln_xt)), controls)
    if not np.any(np.isfinite(values)):
        raise ValueError("all candidates inadmissible")
    best = np.flatnonzero(values == np.max(values))
    j_star = best[np.argmin(np.abs(pi_values[best]))]
    pi_star = float(pi_values[j_star])

    wealth = wealth_paths(model, ensemble, Strategy.fraction(pi_star), x0, mu=mu)
    terminal = utility.u_prime(wealth[:, -1])
    if adjoint_mode == "analytic":
        if utility.name != "log":
            raise ValueError("analytic adjoints are available for log utility only")
        adjoints = analytic_log_adjoints(model, ensemble, wealth, pi_star, mu=mu)
    else:
        adjoints = martingale_representation(
            ensemble,
            terminal,
            state={"X": wealth, "F": utility.u_prime(wealth)},
            basis=basis or RegressionBasis(channels=("X",)),
        )
    solution = PrimalSolution(
        model=model,
        ensemble=ensemble,
        utility=utility,
        x0=x0,
        pi=pi_star,
        strategy=Strategy.fraction(pi_star),
        value=float(values[j_star]),
        se=float(ses[j_star]),
        pi_values=pi_values,
        candidate_values=values,
        candidate_se=ses,
        excluded=excluded,
        mu=mu,
        wealth=wealth,
        adjoints=adjoints,
    )
    solution.foc = primal_foc_residual(model, solution)
    return solution


def primal_foc_residual(model: MarketModel, solution: PrimalSolution) -> dict:
    """Residual of b*p1 + sigma*q1 + sum_k gamma_k*r1_k*nu_k, per grid time.

    Cross-sectional means estimate the conditional identity; the summary is
    normalized by the time-average of |b*mean(p1)| so tolerances are
    scale-free.  Interior times (central 80% of the grid) enter the summary.
    """
    ensemble = solution.ensemble
    grid = ensemble.grid
    adj = solution.adjoints
    b = model.drift_on(grid) + _mu_on_grid(solution.mu, grid) * model.vol_on(grid)
    s = model.vol_on(grid)
    p_mean = adj.p[:, :-1].mean(axis=0)
    q_mean = adj.q.mean(axis=0)
    raw = b * p_mean + s * q_mean
    if model.n_marks:
        gam = model.jump_sizes_on(grid)
        raw = raw + np.einsum("ik,pik,k->i", gam, adj.r, model.intensities) / ensemble.n_paths
    scale = float(np.mean(np.abs(b * p_mean)))
    lo, hi = max(1, grid.n_steps // 10), grid.n_steps - max(1, grid.n_steps // 10)
    interior = np.abs(raw[lo:hi])
    normalized = interior / scale if scale > 0 else interior
    return {
        "raw": raw,
        "scale": scale,
        "mean_normalized": float(np.mean(normalized)),
        "max_normalized": float(np.max(normalized)),
        "interior": (lo, hi),
    }


def hamiltonian_derivative_check(
    model: MarketModel,
    solution: PrimalSolution,
    direction=1.0,
    bump: float = 0.025,
    control_variates: bool = True,
) -> tuple[float, float]:
    """Central finite difference of the objective along ``direction`` at the solution.

    Uses common random numbers; by the necessary optimality condition the
    derivative vanishes at an optimum.  Returns (estimate, standard error).
    """
    ensemble = solution.ensemble
    beta = eval_on_grid(direction, ensemble.grid.left_times)
    if not np.any(beta):
        return 0.0, 0.0
    pi_plus = solution.pi + bump * beta
    pi_minus = solution.pi - bump * beta
    u = solution.utility.u
    up = u(np.exp(terminal_log_wealth(model, ensemble, pi_plus, solution.x0, mu=solution.mu)))
    dn = u(np.exp(terminal_log_wealth(model, ensemble, pi_minus, solution.x0, mu=solution.mu)))
    controls = ensemble.terminal_controls() if control_variates else None
    est, se = cv_mean((up - dn) / (2.0 * bump), controls)
    return est, se
