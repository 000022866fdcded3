"""Dual scenario problem over martingale-measure densities, and replication.

Scenario controls are parameterized by the jump ratios theta1; the Brownian
ratio theta0 is then eliminated exactly through the linear martingale-measure
constraint, so every emitted control satisfies it pointwise.  The optimal
scenario's claim -V'(G(T)) is replicated by the portfolio q2/(sigma*S), with
the jump-branch fallback r2/(gamma*S) wherever sigma vanishes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bsde import AdjointTriple, DriverSpec, RegressionBasis, solve_linear_bsde
from .market import (
    DEGENERATE_VOL,
    THETA1_FLOOR,
    MarketModel,
    PathEnsemble,
    TimeGrid,
    density_paths,
    price_paths,
    terminal_log_density,
    _mu_on_grid,
)
from .mc import cv_mean
from .preferences import UtilityPair


@dataclass(frozen=True)
class ScenarioControl:
    """Density control (theta0, theta1) with initial value y, optionally a drift
    perturbation mu in robust mode.  Arrays are per grid step (and per mark)."""

    theta0: np.ndarray
    theta1: np.ndarray
    y: float
    mu: object = None

    def __post_init__(self) -> None:
        if not self.y > 0:
            raise ValueError("initial density y must be positive")


@dataclass
class DualSolution:
    model: MarketModel
    ensemble: PathEnsemble
    pair: UtilityPair
    y: float
    control: ScenarioControl
    value: float
    se: float
    theta1_values: list
    candidate_values: np.ndarray
    candidate_se: np.ndarray
    excluded: list = field(default_factory=list)
    density: np.ndarray | None = None
    adjoints: AdjointTriple | None = None
    foc: dict | None = None
    replication: dict | None = None


def scenario_from_theta1(
    model: MarketModel,
    grid: TimeGrid,
    theta1,
    y: float,
    mu=None,
) -> ScenarioControl:
    """Build a control satisfying the martingale-measure constraint exactly.

    Where sigma(t) != 0, theta0 is eliminated through
    theta0 = -(b + mu*sigma + sum_k gamma_k*theta1_k*nu_k)/sigma.  On steps
    with vanishing sigma the constraint pins the jump ratios instead: theta1
    is projected onto the constraint hyperplane (nu-weighted least squares)
    and theta0 is set to zero.
    """
    b = model.drift_on(grid)
    s = model.vol_on(grid)
    mu_arr = _mu_on_grid(mu, grid)
    k = model.n_marks
    theta1 = np.broadcast_to(np.asarray(theta1, dtype=float), (grid.n_steps, k)).copy() if k else np.zeros((grid.n_steps, 0))
    gam = model.jump_sizes_on(grid)
    nu = model.intensities
    rhs = -(b + mu_arr * s)
    theta0 = np.zeros(grid.n_steps)
    degenerate = np.abs(s) < DEGENERATE_VOL
    for i in range(grid.n_steps):
        jump_term = float(gam[i] @ (theta1[i] * nu)) if k else 0.0
        if not degenerate[i]:
            theta0[i] = (rhs[i] - jump_term) / s[i]
        else:
            if k == 0 or not np.any(np.abs(gam[i]) > 0):
                if abs(rhs[i]) > 1e-14:
                    raise ValueError(
                        f"no martingale measure at step {i}: sigma = 0, no jumps, drift != 0"
                    )
                continue
            lam = (rhs[i] - jump_term) / float(gam[i] @ (gam[i] * nu))
            theta1[i] = theta1[i] + lam * gam[i]
    if theta1.size and np.any(theta1 < THETA1_FLOOR):
        raise ValueError("theta1 below -1 + eps after constraint elimination")
    return ScenarioControl(theta0=theta0, theta1=theta1, y=float(y), mu=mu)


def unique_scenario_no_jumps(model: MarketModel, grid: TimeGrid, y: float) -> ScenarioControl:
    """The single admissible scenario theta0 = -b/sigma of a no-jump market."""
    if model.n_marks:
        raise ValueError("market has jumps; the scenario family is not a singleton")
    b, s = model.drift_on(grid), model.vol_on(grid)
    if np.any(np.abs(s) < DEGENERATE_VOL):
        raise ValueError("sigma vanishes on the grid")
    ratio = b / s
    if not np.all(np.isfinite(ratio)):
        raise ValueError("b/sigma unbounded on the grid")
    return ScenarioControl(theta0=-ratio, theta1=np.zeros((grid.n_steps, 0)), y=float(y))


def dual_driver(model: MarketModel, grid: TimeGrid, mu=None) -> DriverSpec:
    """dt-term of the dual adjoint equation: (b + mu*sigma)/sigma times q.

    On steps where sigma vanishes the same exposure is carried by the jump
    integrand, so the coefficient moves to r/gamma (per mark).
    """
    b = model.drift_on(grid) + _mu_on_grid(mu, grid) * model.vol_on(grid)
    s = model.vol_on(grid)
    degenerate = np.abs(s) < DEGENERATE_VOL
    q_coeff = np.where(degenerate, 0.0, b / np.where(degenerate, 1.0, s))
    k = model.n_marks
    if k:
        gam = model.jump_sizes_on(grid)
        nu = model.intensities
        r_coeff = np.zeros((grid.n_steps, k))
        for i in np.flatnonzero(degenerate):
            ok = np.abs(gam[i]) > 0
            if not np.any(ok):
                continue
            w = nu * ok
            w = w / w.sum() if w.sum() > 0 else ok / ok.sum()
            r_coeff[i, ok] = b[i] * w[ok] / gam[i, ok]
    else:
        r_coeff = np.zeros((grid.n_steps, 0))
    return DriverSpec(q_coeff=q_coeff, r_coeff=r_coeff)


def analytic_log_dual_adjoints(
    model: MarketModel,
    ensemble: PathEnsemble,
    density: np.ndarray,
    control: ScenarioControl,
) -> AdjointTriple:
    """Closed-form dual adjoints for the log conjugate at a deterministic scenario.

    The adjoint equation is solved by p2 = c(t)/G with a deterministic tail
    factor c, c(T) = 1, whose rate balances the drift of 1/G against the
    dt-term of the equation; c is identically one at the optimal scenario.
    The integrands follow from the exponential update:
    q2 = -theta0*p2 and r2_k = ((1+theta1_k)^{-1} - 1)*p2(t-).
    """
    grid = ensemble.grid
    dt = grid.dt
    k = model.n_marks
    theta0 = np.broadcast_to(np.asarray(control.theta0, dtype=float), (grid.n_steps,))
    theta1 = np.asarray(control.theta1, dtype=float).reshape(grid.n_steps, k) if k else np.zeros((grid.n_steps, 0))
    nu = model.intensities
    jump_gain = (1.0 / (1.0 + theta1) - 1.0) if k else theta1
    # drift rate of 1/G as a stochastic exponential
    a = theta0**2
    if k:
        a = a + theta1 @ nu + jump_gain @ nu
    # dt-coefficient of the adjoint equation applied to (q, r)
    b = model.drift_on(grid) + _mu_on_grid(control.mu, grid) * model.vol_on(grid)
    s = model.vol_on(grid)
    live = np.abs(s) >= DEGENERATE_VOL
    psi = np.zeros(grid.n_steps)
    psi[live] = -theta0[live] * b[live] / s[live]
    if k:
        gam = model.jump_sizes_on(grid)
        for i in np.flatnonzero(~live):
            ok = np.abs(gam[i]) > 0
            if not np.any(ok):
                continue
            w = nu * ok
            w = w / w.sum() if w.sum() > 0 else ok / ok.sum()
            psi[i] = b[i] * float((w[ok] / gam[i, ok]) @ jump_gain[i, ok])
    rate = -a + psi
    tail = np.concatenate([np.cumsum((rate * dt)[::-1])[::-1], [0.0]])
    c = np.exp(tail)
    p = c[None, :] / density
    q = -theta0[None, :] * p[:, :-1]
    r = jump_gain[None, :, :] * p[:, :-1, None] if k else np.zeros((ensemble.n_paths, grid.n_steps, 0))
    return AdjointTriple(p, q, r, mode="analytic", diagnostics={"family": "log-dual"})


def solve_dual_search(
    model: MarketModel,
    pair: UtilityPair,
    y: float,
    ensemble: PathEnsemble,
    theta1_values=None,
    mu=None,
    adjoint_mode: str = "regression",
    control_variates: bool = True,
    basis: RegressionBasis | None = None,
    replicate: bool = True,
) -> DualSolution:
    """Maximize E[-V(G(T))] over a family of constant-per-mark jump ratios.

    theta0 is eliminated exactly per candidate, so the constraint residual is
    zero pointwise for every scenario evaluated.  In a no-jump market the
    family collapses to the unique scenario.
    """
    grid = ensemble.grid
    if model.n_marks == 0:
        candidates = [np.zeros(0)]
    else:
        if theta1_values is None:
            raise ValueError("theta1_values required for a jump market")
        candidates = [np.broadcast_to(np.asarray(t, dtype=float), (model.n_marks,)) for t in theta1_values]
    controls_cv = ensemble.terminal_controls() if control_variates else None
    values = np.full(len(candidates), -np.inf)
    ses = np.zeros(len(candidates))
    scenario_cache: list[ScenarioControl | None] = [None] * len(candidates)
    excluded = []
    for j, th1 in enumerate(candidates):
        try:
            control = scenario_from_theta1(model, grid, th1, y, mu=mu)
        except ValueError as exc:
            excluded.append({"theta1": np.asarray(th1).tolist(), "reason": str(exc)})
            continue
        scenario_cache[j] = control
        ln_gt = terminal_log_density(ensemble, control)
        values[j], ses[j] = cv_mean(-pair.v(np.exp(ln_gt)), controls_cv)
    if not np.any(np.isfinite(values)):
        raise ValueError("all scenario candidates inadmissible")
    best = np.flatnonzero(values == np.max(values))
    norms = [float(np.linalg.norm(candidates[j])) for j in best]
    j_star = best[int(np.argmin(norms))]
    control = scenario_cache[j_star]

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
            driver=dual_driver(model, grid, mu=mu),
            state={"G": density, "F": pair.inverse_marginal(density)},
            basis=basis or RegressionBasis(channels=("G",)),
        )
    solution = DualSolution(
        model=model,
        ensemble=ensemble,
        pair=pair,
        y=float(y),
        control=control,
        value=float(values[j_star]),
        se=float(ses[j_star]),
        theta1_values=[np.asarray(c).tolist() for c in candidates],
        candidate_values=values,
        candidate_se=ses,
        excluded=excluded,
        density=density,
        adjoints=adjoints,
    )
    solution.foc = dual_foc_residual(solution)
    if replicate:
        phi, x0 = replicating_portfolio(model, solution)
        solution.replication = replication_check(
            model, phi, x0, terminal, ensemble, mu=mu
        )
    return solution


def evaluate_dual_scenario(
    model: MarketModel,
    pair: UtilityPair,
    control: ScenarioControl,
    ensemble: PathEnsemble,
    adjoint_mode: str = "regression",
    control_variates: bool = True,
    basis: RegressionBasis | None = None,
    replicate: bool = False,
) -> DualSolution:
    """Dual solution object for one given scenario (no search).

    Used by the bridge round trips, which hand back a fully determined
    scenario rather than a candidate family.
    """
    grid = ensemble.grid
    ln_gt = terminal_log_density(ensemble, control)
    value, se = cv_mean(
        -pair.v(np.exp(ln_gt)),
        ensemble.terminal_controls() if control_variates else None,
    )
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
            driver=dual_driver(model, grid, mu=control.mu),
            state={"G": density, "F": pair.inverse_marginal(density)},
            basis=basis or RegressionBasis(channels=("G",)),
        )
    solution = DualSolution(
        model=model,
        ensemble=ensemble,
        pair=pair,
        y=float(control.y),
        control=control,
        value=float(value),
        se=float(se),
        theta1_values=[np.asarray(control.theta1[0]).tolist()] if model.n_marks else [[]],
        candidate_values=np.array([value]),
        candidate_se=np.array([se]),
        density=density,
        adjoints=adjoints,
    )
    solution.foc = dual_foc_residual(solution)
    if replicate:
        phi, x0 = replicating_portfolio(model, solution)
        solution.replication = replication_check(model, phi, x0, terminal, ensemble, mu=control.mu)
    return solution


def dual_foc_residual(solution: DualSolution) -> dict:
    """Residual of -q2*gamma/sigma + r2 = 0 per (time, mark), from the adjoints.

    Vacuous (empty array) in a no-jump market.  Steps with vanishing sigma are
    excluded; there the exposure identity is enforced through the replication
    branch instead.  Normalized by the mean magnitude of r2.
    """
    model, ensemble = solution.model, solution.ensemble
    grid = ensemble.grid
    k = model.n_marks
    if k == 0:
        return {"raw": np.zeros((grid.n_steps, 0)), "mean_normalized": 0.0,
                "max_normalized": 0.0, "scale": 0.0}
    s = model.vol_on(grid)
    gam = model.jump_sizes_on(grid)
    adj = solution.adjoints
    live = np.abs(s) >= DEGENERATE_VOL
    q_mean = adj.q.mean(axis=0)
    r_mean = adj.r.mean(axis=0)
    raw = np.zeros((grid.n_steps, k))
    raw[live] = -(q_mean[live] / s[live])[:, None] * gam[live] + r_mean[live]
    scale = float(np.mean(np.abs(r_mean[live]))) if np.any(live) else 0.0
    lo, hi = max(1, grid.n_steps // 10), grid.n_steps - max(1, grid.n_steps // 10)
    interior = np.abs(raw[lo:hi][live[lo:hi]])
    normalized = interior / scale if scale > 0 else interior
    return {
        "raw": raw,
        "scale": scale,
        "mean_normalized": float(np.mean(normalized)) if normalized.size else 0.0,
        "max_normalized": float(np.max(normalized)) if normalized.size else 0.0,
    }


def replicating_portfolio(model: MarketModel, solution: DualSolution) -> tuple[np.ndarray, float]:
    """Unit-count portfolio replicating -V'(G(T)): q2/(sigma*S), with the
    r2/(gamma*S) branch wherever sigma vanishes; initial value p2(0).

    Returns (phi as an (n_paths, n_steps) array, initial value).
    """
    ensemble = solution.ensemble
    grid = ensemble.grid
    adj = solution.adjoints
    s = model.vol_on(grid)
    gam = model.jump_sizes_on(grid)
    nu = model.intensities
    spot = ensemble.channels.get("S")
    if spot is None:
        spot = price_paths(model, ensemble)
    scale = float(np.mean(np.abs(adj.p[:, -1])))
    phi = np.zeros((ensemble.n_paths, grid.n_steps))
    for i in range(grid.n_steps):
        if abs(s[i]) >= DEGENERATE_VOL:
            phi[:, i] = adj.q[:, i] / (s[i] * spot[:, i])
            continue
        ok = np.abs(gam[i]) > 0 if model.n_marks else np.zeros(0, dtype=bool)
        if model.n_marks and np.any(ok):
            # nu-weighted least squares of r_k = phi*S*gamma_k over live marks
            num = (adj.r[:, i, ok] * (gam[i, ok] * nu[ok])[None, :]).sum(axis=1)
            den = float((gam[i, ok] ** 2 * nu[ok]).sum())
            phi[:, i] = num / (den * spot[:, i])
        else:
            q_size = float(np.max(np.abs(adj.q[:, i])))
            r_size = float(np.max(np.abs(adj.r[:, i]))) if model.n_marks else 0.0
            if max(q_size, r_size) > 1e-6 * scale:
                raise ValueError(
                    f"inconsistent adjoints at step {i}: sigma = 0 and gamma = 0 "
                    "but the integrands are nonzero"
                )
    x0 = float(adj.p[:, 0].mean())
    return phi, x0


def replication_check(
    model: MarketModel,
    phi: np.ndarray,
    x0: float,
    target: np.ndarray,
    ensemble: PathEnsemble,
    mu=None,
) -> dict:
    """Terminal error of the Euler-simulated portfolio wealth against the claim.

    Pathwise relative errors; reports the RMS and the maximum, plus how many
    paths lost positivity on the way (none, for the scenarios exercised here).
    """
    grid = ensemble.grid
    dt = grid.dt
    b = model.drift_on(grid) + _mu_on_grid(mu, grid) * model.vol_on(grid)
    s = model.vol_on(grid)
    gam = model.jump_sizes_on(grid)
    spot = ensemble.channels.get("S")
    if spot is None:
        spot = price_paths(model, ensemble)
    x = np.full(ensemble.n_paths, float(x0))
    nonpositive = 0
    dnt = ensemble.compensated_jumps if model.n_marks else None
    for i in range(grid.n_steps):
        inc = b[i] * dt + s[i] * ensemble.brownian_increments[:, i]
        if model.n_marks:
            inc = inc + dnt[:, i] @ gam[i]
        x = x + phi[:, i] * spot[:, i] * inc
        nonpositive += int(np.sum(x <= 0))
    rel = (x - target) / target
    return {
        "rmse_rel": float(np.sqrt(np.mean(rel**2))),
        "max_rel": float(np.max(np.abs(rel))),
        "initial_value": float(x0),
        "n_nonpositive": nonpositive,
    }
