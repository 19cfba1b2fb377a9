"""Equilibrium risk premia in a market of many exponential-utility agents.

The package constructs the endogenous market price of risk
theta = -gamma_hat * E[Z^{0,par} | common noise]^T by solving the
quadratic-growth BSDE of a representative continuum of agents: in closed
form for exponential-quadratic-Gaussian liabilities (Riccati ODEs), and by
regression Monte Carlo with a mean-field fixed-point iteration in general.
Finite-N market clearing at rate O(1/N) and the security-replacement
invariance of the equilibrium are verified numerically.
"""

from .bsde import (
    BsdeSolution,
    Perturbation,
    VerificationReport,
    bmo_proxy,
    cole_hopf_oracle,
    doleans_weights,
    optimal_strategy,
    solve_agent_bsde,
    solve_under_q,
    verify_condition_r,
)
from .clearing import (
    ClearingReport,
    DiscreteDist,
    Population,
    ReplacementSpec,
    agent_strategies,
    build_population,
    clearing_residual,
    fresh_idio_levels,
    random_replacement,
    rate_fit,
    replacement_invariance,
    run_clearing_study,
)
from .config import (
    ScenarioConfig,
    apply_overrides,
    build_basis,
    build_eqg,
    build_gamma_dist,
    build_grid,
    build_liability,
    build_market,
    build_xi_dist,
    config_from_dict,
    config_sha256,
    config_to_dict,
    load_config,
)
from .equilibrium import (
    EquilibriumPath,
    cole_hopf_idio,
    equilibrium_path,
    fubini_malliavin_check,
    martingale_check,
    sign_law_violations,
)
from .errors import (
    ComplexRho,
    ConfigError,
    DimensionMismatch,
    IllConditionedQ,
    InsufficientSpan,
    MfequilError,
    MissingStageOutput,
    NonpositiveGamma,
    PicardDiverged,
    RegressionRankDeficient,
    SingularSigma,
    WeightDegenerate,
)
from .liabilities import CrossTerm, EqgCommon, GaussianIdio, LiabilitySpec, terminal_g
from .market import (
    AgentParams,
    MarketSpec,
    PopulationStats,
    TimeGrid,
    excess_return_from_theta,
    gamma_hat,
    project,
    risk_premium_from_mu,
    validate_market,
)
from .meanfield import (
    CloudLayout,
    ContractionDiagnostics,
    MeanFieldSolution,
    cloud_mean,
    gamma_map,
    smallness_from_liability,
    smallness_report,
    solve_mean_field,
    theta_from_solution,
)
from .paths import PathBundle, coarsen_bundle, export_paths_csv, simulate_paths
from .regression import BasisEngine, RegressionBasis, TreeEngine, feature_columns
from .riccati import (
    EqgSpec,
    RiccatiSolution,
    riccati_closed_form,
    riccati_for_spec,
    riccati_ode,
)

__version__ = "0.1.0"
