"""duallab: a Monte Carlo laboratory for primal, dual and robust portfolio choice
in jump-diffusion markets, with adjoint-equation cross-checks."""

from .bridge import (
    BridgeReport,
    BridgeViolationError,
    bridged_fraction,
    dual_to_primal,
    primal_to_dual,
    robust_dual_to_primal,
    robust_primal_to_dual,
    verify_product_identity,
)
from .bsde import (
    AdjointTriple,
    DriverSpec,
    RegressionBasis,
    bsde_residual_report,
    diagnostics_json,
    martingale_representation,
    solve_linear_bsde,
)
from .dual import (
    DualSolution,
    ScenarioControl,
    dual_foc_residual,
    evaluate_dual_scenario,
    replicating_portfolio,
    replication_check,
    scenario_from_theta1,
    solve_dual_search,
    unique_scenario_no_jumps,
)
from .market import (
    AdmissibilityError,
    MarketModel,
    PathEnsemble,
    Perturbation,
    Strategy,
    TimeGrid,
    density_paths,
    elmm_residual,
    ensemble_summary,
    ensemble_to_csv,
    perturbed_model,
    price_paths,
    simulate_drivers,
    wealth_paths,
)
from .preferences import (
    Penalty,
    UtilityPair,
    fenchel_gap,
    make_log_utility,
    make_power_utility,
    make_quadratic_penalty,
)
from .primal import (
    PrimalSolution,
    hamiltonian_derivative_check,
    merton_log_closed_form,
    primal_foc_residual,
    solve_primal_search,
)
from .robust import (
    RobustDualSolution,
    RobustLogClosedForm,
    RobustPrimalSolution,
    mu_from_foc,
    robust_dual_foc_residuals,
    robust_log_closed_form,
    robust_primal_foc_residuals,
    solve_robust_dual,
    solve_robust_saddle,
)

__version__ = "0.1.0"
