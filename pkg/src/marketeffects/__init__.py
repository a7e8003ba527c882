"""Treatment effects when units interact through market-clearing prices.

Simulate stochastic markets, run randomized experiments that perturb the
price each unit faces, and estimate direct, indirect and marginal-policy
effects with confidence intervals.
"""

__version__ = "0.1.0"

from .equilibrium import (  # noqa: E402
    EquilibriumError,
    MeanFieldSolution,
    SolverSettings,
    check_contraction,
    policy_effects,
    price_sensitivity,
    solve_finite_sample_price,
    solve_mean_field_price,
    true_effects,
)
from .estimators import (  # noqa: E402
    EstimateReport,
    MarketEffectEstimator,
    aie_from_elasticities,
    estimate,
)
from .experiment import Design, ExperimentDataset, run_experiment  # noqa: E402
from .model import (  # noqa: E402
    CustomScenario,
    GoatHayScenario,
    Scenario,
    TechScenario,
    load_scenario,
    make_scenario,
    sample_population,
)
from .montecarlo import ReplicationPlan, run_replications  # noqa: E402

__all__ = [
    "CustomScenario",
    "Design",
    "EquilibriumError",
    "EstimateReport",
    "ExperimentDataset",
    "GoatHayScenario",
    "MarketEffectEstimator",
    "MeanFieldSolution",
    "ReplicationPlan",
    "Scenario",
    "SolverSettings",
    "TechScenario",
    "aie_from_elasticities",
    "check_contraction",
    "estimate",
    "load_scenario",
    "make_scenario",
    "policy_effects",
    "price_sensitivity",
    "run_experiment",
    "run_replications",
    "sample_population",
    "solve_finite_sample_price",
    "solve_mean_field_price",
    "true_effects",
]
