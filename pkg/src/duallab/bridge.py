"""Constructive maps between primal and dual solutions, with identity checks.

From a primal solution the scenario ratios are theta0 = q1/p1(t-) and
theta1 = r1/p1(t-) with y = p1(0); the density they drive must reproduce
p1 pathwise and hit U'(X(T)) at the horizon.  From a dual solution the
portfolio is q2/(sigma*S(t-)) with x = p2(0); the wealth it generates must
reproduce p2 pathwise and deliver -V'(G(T)).  The robust maps carry the
drift perturbation through unchanged.  Emitted scenario controls are
projected onto the martingale-measure constraint (the theta0 elimination is
exact), and the raw ratio enters the report as a residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dual import DualSolution, ScenarioControl, scenario_from_theta1
from .market import (
    DEGENERATE_VOL,
    MarketModel,
    PathEnsemble,
    Strategy,
    density_paths,
    elmm_residual,
    wealth_paths,
)
from .primal import PrimalSolution
from .robust import RobustDualSolution, RobustPrimalSolution


class BridgeViolationError(ValueError):
    """The constructed object violates a hypothesis of the transfer map."""


@dataclass
class BridgeReport:
    """Identity residuals for one bridge direction.

    Every entry states the identity it checks alongside the measured
    deviation; tolerances differ by orders of magnitude between analytic and
    regression adjoints, so the adjoint mode is always disclosed.
    """

    direction: str
    adjoint_mode: str
    identities: dict[str, dict] = field(default_factory=dict)

    def add(self, name: str, statement: str, max_abs: float, max_rel: float | None = None) -> None:
        entry = {"statement": statement, "max_abs": float(max_abs)}
        if max_rel is not None:
            entry["max_rel"] = float(max_rel)
        self.identities[name] = entry

    def __getitem__(self, name: str) -> dict:
        return self.identities[name]


def _theta_ratios(adjoints, n_marks: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-time scenario ratios from adjoints: means of q1/p1 and r1/p1.

    p1 at the left endpoint of each step plays the left limit p1(t-).
    """
    p_left = adjoints.p[:, :-1]
    theta0 = (adjoints.q / p_left).mean(axis=0)
    if n_marks:
        theta1 = (adjoints.r / p_left[:, :, None]).mean(axis=0)
    else:
        theta1 = np.zeros((adjoints.q.shape[1], 0))
    return theta0, theta1


def _primal_to_dual(
    solution, model: MarketModel, mu
) -> tuple[ScenarioControl, float, BridgeReport]:
    ensemble: PathEnsemble = solution.ensemble
    grid = ensemble.grid
    adj = solution.adjoints
    theta0_raw, theta1_raw = _theta_ratios(adj, model.n_marks)
    y = float(adj.p[:, 0].mean())
    try:
        control = scenario_from_theta1(model, grid, theta1_raw, y, mu=mu)
    except ValueError as exc:
        raise BridgeViolationError(str(exc)) from exc

    report = BridgeReport(
        direction="robust-primal-to-dual" if mu is not None else "primal-to-dual",
        adjoint_mode=adj.mode,
    )
    density = density_paths(ensemble, control)
    p1 = adj.p
    report.add(
        "process_link",
        "density driven by the bridged scenario equals the primal adjoint p1, pathwise",
        np.max(np.abs(density - p1)),
        np.max(np.abs(density - p1) / np.abs(p1)),
    )
    marginal = solution.utility.u_prime(solution.wealth[:, -1])
    report.add(
        "terminal_link",
        "G(T) equals the marginal utility of terminal wealth U'(X(T))",
        np.max(np.abs(density[:, -1] - marginal)),
        np.max(np.abs(density[:, -1] - marginal) / np.abs(marginal)),
    )
    report.add(
        "initial_value",
        "y is the initial adjoint value p1(0)",
        abs(y - float(adj.p[:, 0].mean())),
    )
    report.add(
        "ratio_residual",
        "raw adjoint ratio q1/p1 matches the constraint-eliminated theta0",
        np.max(np.abs(theta0_raw - control.theta0)),
    )
    report.add(
        "constraint",
        "martingale-measure constraint of the emitted scenario, pointwise",
        np.max(np.abs(elmm_residual(model, grid, control))),
    )
    return control, y, report


def primal_to_dual(solution: PrimalSolution) -> tuple[ScenarioControl, float, BridgeReport]:
    """Scenario and initial density built from a primal solution's adjoints."""
    return _primal_to_dual(solution, solution.model, mu=None)


def robust_primal_to_dual(
    solution: RobustPrimalSolution,
) -> tuple[ScenarioControl, float, float, BridgeReport]:
    """Robust variant: the perturbation transfers unchanged (mu_dual = mu_primal)."""
    control, y, report = _primal_to_dual(solution, solution.model, mu=solution.mu)
    return control, float(solution.mu), y, report


def _dual_to_primal(solution, model: MarketModel, mu):
    ensemble: PathEnsemble = solution.ensemble
    grid = ensemble.grid
    adj = solution.adjoints
    s = model.vol_on(grid)
    if np.any(np.abs(s) < DEGENERATE_VOL):
        raise BridgeViolationError(
            "sigma vanishes on the grid; use the replication branch instead"
        )
    pi_path = adj.q / (s[None, :] * adj.p[:, :-1])
    x0 = float(adj.p[:, 0].mean())
    if not x0 > 0:
        raise BridgeViolationError("initial adjoint value p2(0) is not positive")
    strategy = Strategy.fraction(pi_path)
    try:
        wealth = wealth_paths(model, ensemble, strategy, x0, mu=mu)
    except ValueError as exc:
        raise BridgeViolationError(str(exc)) from exc

    report = BridgeReport(
        direction="robust-dual-to-primal" if mu is not None else "dual-to-primal",
        adjoint_mode=adj.mode,
    )
    report.add(
        "process_link",
        "wealth under the bridged portfolio equals the dual adjoint p2, pathwise",
        np.max(np.abs(wealth - adj.p)),
        np.max(np.abs(wealth - adj.p) / np.abs(adj.p)),
    )
    claim = solution.pair.inverse_marginal(solution.density[:, -1])
    report.add(
        "terminal_link",
        "X(T) equals the claim -V'(G(T))",
        np.max(np.abs(wealth[:, -1] - claim)),
        np.max(np.abs(wealth[:, -1] - claim) / np.abs(claim)),
    )
    report.add(
        "initial_value",
        "x is the initial adjoint value p2(0)",
        abs(x0 - float(adj.p[:, 0].mean())),
    )
    return strategy, pi_path, x0, wealth, report


def dual_to_primal(solution: DualSolution) -> tuple[Strategy, float, BridgeReport]:
    """Portfolio and initial wealth built from a dual solution's adjoints."""
    strategy, _, x0, _, report = _dual_to_primal(solution, solution.model, mu=None)
    return strategy, x0, report


def robust_dual_to_primal(
    solution: RobustDualSolution,
) -> tuple[Strategy, float, float, BridgeReport]:
    """Robust variant: mu transfers unchanged and the wealth lives in the
    perturbed market."""
    strategy, _, x0, _, report = _dual_to_primal(solution, solution.model, mu=solution.mu)
    return strategy, float(solution.mu), x0, report


def bridged_fraction(solution, constant_tol: float = 1e-9) -> float:
    """Collapse the bridged fraction-of-wealth process to a scalar.

    Valid when the fraction is constant across paths and times (the log
    cases); raises otherwise.
    """
    model = solution.model
    _, pi_path, _, _, _ = _dual_to_primal(
        solution, model, mu=getattr(solution, "mu", None)
    )
    pi = float(pi_path.mean())
    if np.max(np.abs(pi_path - pi)) > constant_tol * max(1.0, abs(pi)):
        raise ValueError("bridged fraction is not constant; no scalar reduction")
    return pi


def verify_product_identity(
    wealth: np.ndarray, density: np.ndarray, x0: float, y0: float
) -> float:
    """Max over paths and times of |X(t)G(t) - x*y|.

    With exact exponential updates the log cases cancel exponents exactly, so
    the deviation sits at accumulation-rounding level; Euler updates leave a
    step-size-dependent deviation used by the scheme-order study.
    """
    return float(np.max(np.abs(wealth * density - x0 * y0)))
