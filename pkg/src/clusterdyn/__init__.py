"""Resource-limited treatment allocation in clusters: regimes, g-formulae and estimators."""

from .combinatorics import (
    composition_array,
    composition_rank,
    conditional_covariate_composition_pmf,
    count_compositions,
    covariate_composition_pmf,
    enumerate_compositions,
    log_multinomial,
    outcome_composition_pmf,
)
from .errors import (
    BudgetExceeded,
    ClusterDynError,
    EmptyCoarseLevel,
    EmptyData,
    IncompatibleComposition,
    InfeasibleTarget,
    InsufficientBurnIn,
    LimitExceeded,
    NegativeProbability,
    NonStochastic,
    Overflow,
    PositivityViolated,
    SizeMismatch,
    ZeroMassLevel,
)
from .estimators import (
    EmpiricalLaw,
    EstimateReport,
    OptimalTarget,
    TabularLaw,
    eif_phi,
    eif_psi,
    empirical_cate_and_eta,
    fit_empirical,
    ipw_estimate,
    one_step_estimate,
    online_estimate,
    plugin_estimate,
    z_quantile,
)
from .gformula import (
    CustomFunctional,
    GFormulaReport,
    IndicatorAtLeast,
    MeanOutcome,
    OutcomeCountDistribution,
    TreatedCountDistribution,
    compositional_gformula_expectation,
    individual_gformula_expectation,
    large_cluster_value,
    reduced_compositional_expectation,
    value_curve,
)
from .model import Coarsening, CoarseModel, DiscreteModel, cate, coarsen_model, make_model, validate_model
from .regimes import (
    LargeClusterDensity,
    RegimeSpec,
    ThresholdResult,
    compositional_intervention_density,
    compositional_support,
    conditional_intervention_density,
    decompose_fractional_allocation,
    large_cluster_density,
    marginal_intervention_density,
    mixture_conditional_density,
    omega_threshold,
    optimal_regime,
    sample_allocation,
    treated_mass,
)
from .simulator import (
    Bernoulli,
    ClusterData,
    MixedFlip,
    OracleLimits,
    RegimeBased,
    SubCluster,
    child_seed,
    exact_oracle,
    replicate,
    simulate_cluster,
    simulate_counterfactual,
)

__version__ = "0.1.0"
