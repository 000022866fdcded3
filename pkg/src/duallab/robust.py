"""Robust (penalized worst-case drift) primal game and its dual.

The primal side is a saddle problem: the investor maximizes over portfolios
while an adversary perturbs the drift by mu*sigma at convex cost rho(mu).  A
payoff matrix over (pi, mu) grids is evaluated with common random numbers; a
pure saddle cell is returned when one exists, otherwise the minimax/maximin
cells and their gap.  The dual side maximizes E[-V(G(T))] - penalty over
scenarios consistent with the perturbed constraint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bsde import AdjointTriple, RegressionBasis, martingale_representation, solve_linear_bsde
from .dual import (
    DualSolution,
    ScenarioControl,
    analytic_log_dual_adjoints,
    dual_driver,
    scenario_from_theta1,
)
from .market import (
    AdmissibilityError,
    MarketModel,
    PathEnsemble,
    Strategy,
    density_paths,
    terminal_log_density,
    terminal_log_wealth,
    wealth_paths,
    _mu_on_grid,
)
from .mc import cv_mean
from .preferences import Penalty, UtilityPair
from .primal import analytic_log_adjoints


@dataclass(frozen=True)
class RobustLogClosedForm:
    """Explicit solution for log utility with quadratic penalty, no jumps.

    With penalty scale c:  mu(t) = -b/((1+c) sigma),  pi(t) = c*b/((1+c) sigma^2);
    at c = 1 these are -b/(2 sigma) and b/(2 sigma^2), half the plain optimal
    fraction.  The unit-count portfolio is phi = (b/sigma + mu)/(G sigma S).
    """

    model: MarketModel
    penalty_scale: float = 1.0

    def mu(self, t: float) -> float:
        b = self.model.drift(t) if callable(self.model.drift) else self.model.drift
        s = self.model.vol(t) if callable(self.model.vol) else self.model.vol
        return -b / ((1.0 + self.penalty_scale) * s)

    def pi(self, t: float) -> float:
        b = self.model.drift(t) if callable(self.model.drift) else self.model.drift
        s = self.model.vol(t) if callable(self.model.vol) else self.model.vol
        if self.penalty_scale == 1.0:
            return b / (2.0 * s**2)
        return (self.penalty_scale * b) / ((1.0 + self.penalty_scale) * s**2)

    def phi(self, t: float, spot, density):
        """Unit counts from the dual integrand: q2/(sigma*S) with q2 = (b/sigma + mu)/G."""
        b = self.model.drift(t) if callable(self.model.drift) else self.model.drift
        s = self.model.vol(t) if callable(self.model.vol) else self.model.vol
        return (b / s + self.mu(t)) / (np.asarray(density) * s * np.asarray(spot))


def robust_log_closed_form(model: MarketModel, penalty: Penalty) -> RobustLogClosedForm:
    """Validate the closed-form preconditions and return the explicit solution."""
    if model.n_marks:
        raise ValueError("closed form requires a no-jump market")
    if penalty.name != "quadratic":
        raise ValueError("closed form requires the quadratic penalty")
    return RobustLogClosedForm(model=model, penalty_scale=penalty.scale)


@dataclass
class RobustPrimalSolution:
    model: MarketModel
    ensemble: PathEnsemble
    utility: UtilityPair
    penalty: Penalty
    x0: float
    pi: float
    mu: float
    value: float
    se: float
    pi_values: np.ndarray
    mu_values: np.ndarray
    payoff: np.ndarray          # (n_pi, n_mu)
    payoff_se: np.ndarray
    is_saddle: bool
    gap: float
    minimax: float
    maximin: float
    excluded: list = field(default_factory=list)
    wealth: np.ndarray | None = None
    adjoints: AdjointTriple | None = None
    foc: dict | None = None


@dataclass
class RobustDualSolution:
    model: MarketModel
    ensemble: PathEnsemble
    pair: UtilityPair
    penalty: Penalty
    y: float
    control: ScenarioControl
    mu: float
    value: float
    se: float
    candidate_values: np.ndarray
    density: np.ndarray | None = None
    adjoints: AdjointTriple | None = None
    foc: dict | None = None


def solve_robust_saddle(
    model: MarketModel,
    utility: UtilityPair,
    penalty: Penalty,
    x0: float,
    pi_values,
    mu_values,
    ensemble: PathEnsemble,
    adjoint_mode: str = "regression",
    control_variates: bool = True,
    basis: RegressionBasis | None = None,
) -> RobustPrimalSolution:
    """Payoff matrix I(pi, mu) = E[U(X(T))] + integral rho(mu) over the grids.

    A pure saddle is a cell that is the maximum of its column (over pi) and
    the minimum of its row (over mu); ties break toward smaller |pi| then
    smaller |mu|.  When no pure cell exists, the minimax cell is returned and
    the minimax-maximin gap reported.
    """
    grid = ensemble.grid
    pi_values = np.asarray(list(pi_values), dtype=float)
    mu_values = np.asarray(list(mu_values), dtype=float)
    controls_cv = ensemble.terminal_controls() if control_variates else None
    payoff = np.full((pi_values.size, mu_values.size), -np.inf)
    payoff_se = np.zeros_like(payoff)
    excluded = []
    dt = grid.dt
    for jm, mu in enumerate(mu_values):
        pen = float(np.sum(penalty.rho(np.full(grid.n_steps, mu)) * dt))
        for jp, pi in enumerate(pi_values):
            try:
                ln_xt = terminal_log_wealth(model, ensemble, pi, x0, mu=mu)
            except AdmissibilityError as exc:
                excluded.append({"pi": float(pi), "mu": float(mu), "reason": str(exc)})
                continue
            est, se = cv_mean(utility.u(np.exp(ln_xt)), controls_cv)
            payoff[jp, jm] = est + pen
            payoff_se[jp, jm] = se

    col_max = payoff.max(axis=0)
    row_min = payoff.min(axis=1)
    cells = [
        (jp, jm)
        for jp in range(pi_values.size)
        for jm in range(mu_values.size)
        if payoff[jp, jm] == col_max[jm] and payoff[jp, jm] == row_min[jp]
    ]
    minimax = float(col_max.min())
    maximin = float(row_min.max())
    if cells:
        cells.sort(key=lambda c: (abs(pi_values[c[0]]), abs(mu_values[c[1]])))
        jp, jm = cells[0]
        is_saddle, gap = True, 0.0
    else:
        jm = int(np.argmin(col_max))
        jp = int(np.argmax(payoff[:, jm]))
        is_saddle, gap = False, minimax - maximin

    pi_star, mu_star = float(pi_values[jp]), float(mu_values[jm])
    wealth = wealth_paths(model, ensemble, Strategy.fraction(pi_star), x0, mu=mu_star)
    if adjoint_mode == "analytic":
        if utility.name != "log":
            raise ValueError("analytic adjoints are available for log utility only")
        adjoints = analytic_log_adjoints(model, ensemble, wealth, pi_star, mu=mu_star)
    else:
        adjoints = martingale_representation(
            ensemble,
            utility.u_prime(wealth[:, -1]),
            state={"X": wealth, "F": utility.u_prime(wealth)},
            basis=basis or RegressionBasis(channels=("X",)),
        )
    solution = RobustPrimalSolution(
        model=model,
        ensemble=ensemble,
        utility=utility,
        penalty=penalty,
        x0=x0,
        pi=pi_star,
        mu=mu_star,
        value=float(payoff[jp, jm]),
        se=float(payoff_se[jp, jm]),
        pi_values=pi_values,
        mu_values=mu_values,
        payoff=payoff,
        payoff_se=payoff_se,
        is_saddle=is_saddle,
        gap=gap,
        minimax=minimax,
        maximin=maximin,
        excluded=excluded,
        wealth=wealth,
        adjoints=adjoints,
    )
    solution.foc = robust_primal_foc_residuals(model, solution)
    return solution


def robust_primal_foc_residuals(model: MarketModel, solution: RobustPrimalSolution) -> dict:
    """First-order residuals of the primal game at (pi, mu).

    ``drift``:  (b + mu*sigma) p1 + sigma q1 + sum gamma r1 nu  (per time)
    ``penalty``: rho'(mu) + phi*S*sigma*p1 = rho'(mu) + pi*sigma*X*p1.
    Cross-sectional means per time, each normalized by its natural scale.
    """
    ensemble = solution.ensemble
    grid = ensemble.grid
    adj = solution.adjoints
    mu, pi = solution.mu, solution.pi
    b = model.drift_on(grid) + _mu_on_grid(mu, grid) * model.vol_on(grid)
    s = model.vol_on(grid)
    p_mean = adj.p[:, :-1].mean(axis=0)
    q_mean = adj.q.mean(axis=0)
    drift_raw = b * p_mean + s * q_mean
    if model.n_marks:
        gam = model.jump_sizes_on(grid)
        drift_raw = drift_raw + np.einsum("ik,pik,k->i", gam, adj.r, model.intensities) / ensemble.n_paths
    drift_scale = float(np.mean(np.abs(b * p_mean)))

    xp_mean = (solution.wealth[:, :-1] * adj.p[:, :-1]).mean(axis=0)
    pen_raw = float(np.asarray(solution.penalty.rho_prime(mu))) + pi * s * xp_mean
    pen_scale = float(np.mean(np.abs(pi * s * xp_mean)))

    lo, hi = max(1, grid.n_steps // 10), grid.n_steps - max(1, grid.n_steps // 10)
    d_norm = np.abs(drift_raw[lo:hi]) / drift_scale if drift_scale > 0 else np.abs(drift_raw[lo:hi])
    p_norm = np.abs(pen_raw[lo:hi]) / pen_scale if pen_scale > 0 else np.abs(pen_raw[lo:hi])
    return {
        "drift_raw": drift_raw,
        "penalty_raw": pen_raw,
        "drift_scale": drift_scale,
        "penalty_scale": pen_scale,
        "drift_mean_normalized": float(np.mean(d_norm)),
        "drift_max_normalized": float(np.max(d_norm)),
        "penalty_mean_normalized": float(np.mean(p_norm)),
        "penalty_max_normalized": float(np.max(p_norm)),
    }


def solve_robust_dual(
    model: MarketModel,
    pair: UtilityPair,
    penalty: Penalty,
    y: float,
    ensemble: PathEnsemble,
    mu_values,
    theta1_values=None,
    adjoint_mode: str = "regression",
    control_variates: bool = True,
    basis: RegressionBasis | None = None,
) -> RobustDualSolution:
    """Maximize J(theta, mu) = E[-V(G(T))] - integral rho(mu) over a (mu, theta1) grid.

    theta0 is eliminated through the perturbed constraint per candidate, so
    every scenario satisfies it pointwise.
    """
    grid = ensemble.grid
    dt = grid.dt
    mu_values = np.asarray(list(mu_values), dtype=float)
    if model.n_marks == 0:
        theta1_candidates = [np.zeros(0)]
    else:
        if theta1_values is None:
            raise ValueError("theta1_values required for a jump market")
        theta1_candidates = [
            np.broadcast_to(np.asarray(t, dtype=float), (model.n_marks,)) for t in theta1_values
        ]
    controls_cv = ensemble.terminal_controls() if control_variates else None
    combos = [(mu, th1) for mu in mu_values for th1 in theta1_candidates]
    values = np.full(len(combos), -np.inf)
    ses = np.zeros(len(combos))
    cache: list[ScenarioControl | None] = [None] * len(combos)
    for j, (mu, th1) in enumerate(combos):
        try:
            control = scenario_from_theta1(model, grid, th1, y, mu=float(mu))
        except ValueError:
            continue
        cache[j] = control
        ln_gt = terminal_log_density(ensemble, control)
        pen = float(np.sum(penalty.rho(np.full(grid.n_steps, mu)) * dt))
        est, se = cv_mean(-pair.v(np.exp(ln_gt)), controls_cv)
        values[j] = est - pen
        ses[j] = se
    if not np.any(np.isfinite(values)):
        raise ValueError("all robust dual candidates inadmissible")
    best = np.flatnonzero(values == np.max(values))
    sizes = [abs(float(combos[j][0])) + float(np.linalg.norm(combos[j][1])) for j in best]
    j_star = best[int(np.argmin(sizes))]
    mu_star, _ = combos[j_star]
    control = cache[j_star]

    density = density_paths(ensemble, control)
    terminal = pair.inverse_marginal(density[:, -1])
    if adjoint_mode == "analytic":
        if pair.name != "log":
            raise ValueError("analytic dual adjoints are available for the log pair only")
        adjoints = analytic_log_dual_adjoints(model, ensemble, density, control)
    else:
        adjoints = solve_linear_bsde(
            ensemble,
            terminal,
            driver=dual_driver(model, grid, mu=float(mu_star)),
            state={"G": density, "F": pair.inverse_marginal(density)},
            basis=basis or RegressionBasis(channels=("G",)),
        )
    solution = RobustDualSolution(
        model=model,
        ensemble=ensemble,
        pair=pair,
        penalty=penalty,
        y=float(y),
        control=control,
        mu=float(mu_star),
        value=float(values[j_star]),
        se=float(ses[j_star]),
        candidate_values=values,
        density=density,
        adjoints=adjoints,
    )
    solution.foc = robust_dual_foc_residuals(model, solution)
    return solution


def robust_dual_foc_residuals(model: MarketModel, solution: RobustDualSolution) -> dict:
    """First-order residuals of the robust dual at (theta, mu).

    ``jump``:    -q2*gamma/sigma + r2 per (time, mark) — vacuous without marks.
    ``penalty``: rho'(mu) + G*q2, pathwise then averaged per time.
    """
    ensemble = solution.ensemble
    grid = ensemble.grid
    adj = solution.adjoints
    s = model.vol_on(grid)
    live = np.abs(s) >= 1e-14
    k = model.n_marks
    if k:
        gam = model.jump_sizes_on(grid)
        q_mean = adj.q.mean(axis=0)
        r_mean = adj.r.mean(axis=0)
        jump_raw = np.zeros((grid.n_steps, k))
        jump_raw[live] = -(q_mean[live] / s[live])[:, None] * gam[live] + r_mean[live]
        jump_scale = float(np.mean(np.abs(r_mean[live]))) if np.any(live) else 0.0
    else:
        jump_raw = np.zeros((grid.n_steps, 0))
        jump_scale = 0.0

    gq = (solution.density[:, :-1] * adj.q).mean(axis=0)
    pen_raw = float(np.asarray(solution.penalty.rho_prime(solution.mu))) + gq
    pen_scale = float(np.mean(np.abs(gq)))

    lo, hi = max(1, grid.n_steps // 10), grid.n_steps - max(1, grid.n_steps // 10)
    p_norm = np.abs(pen_raw[lo:hi]) / pen_scale if pen_scale > 0 else np.abs(pen_raw[lo:hi])
    j_norm = (np.abs(jump_raw[lo:hi][live[lo:hi]]) / jump_scale
              if (k and jump_scale > 0) else np.abs(jump_raw[lo:hi]).ravel())
    return {
        "jump_raw": jump_raw,
        "penalty_raw": pen_raw,
        "jump_scale": jump_scale,
        "penalty_scale": pen_scale,
        "jump_mean_normalized": float(np.mean(j_norm)) if j_norm.size else 0.0,
        "jump_max_normalized": float(np.max(j_norm)) if j_norm.size else 0.0,
        "penalty_mean_normalized": float(np.mean(p_norm)),
        "penalty_max_normalized": float(np.max(p_norm)),
    }


def mu_from_foc(penalty: Penalty, density_value, q2_value):
    """Perturbation implied by the dual first-order condition: (rho')^{-1}(-G*q2)."""
    return penalty.rho_prime_inv(-np.asarray(density_value) * np.asarray(q2_value))
