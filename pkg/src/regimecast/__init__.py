"""Regime-switching dynamic latent factor models.

Synthetic panel generation, Metropolis-within-Gibbs estimation, and
mixture-Kalman forecasting of continuous factor trajectories and discrete
regime membership, plus a replication harness for simulation studies.
"""

from .model import (
    DROPOUT_NONE,
    Dataset,
    LatentState,
    ModelSpec,
    Parameters,
    SpecError,
    between_measurement_mean,
    insert_phantom_occasions,
    person_effects,
    preprocess_items,
    simulation_spec,
    stay_probability,
    switch_logit,
    transition_matrix,
    within_measurement_mean,
    within_structural_mean,
)
from .datagen import (
    ConfigError,
    GroundTruth,
    NumericError,
    PopulationDistribution,
    generate_dataset,
    inject_missingness,
    sample_population_params,
)
from .sampler import (
    McmcConfig,
    PosteriorDraws,
    PriorConfig,
    SamplerError,
    rhat,
    run_mcmc,
    summarize,
)
from .ffbs import (
    FilterNumericError,
    FilterState,
    ForecastConfig,
    ForecastResult,
    MixtureSummary,
    Quadruple,
    backward_sample,
    combination_weights,
    forecast_from_posterior,
    forecast_horizon,
    init_prior,
    marginal_predictive,
    one_step_forecast,
    propagate,
    update,
)
from .evaluation import (
    EvalReport,
    coverage_rate,
    fi_width,
    replicate_study,
    score_function,
    sensitivity_specificity,
    switch_time,
)

__version__ = "0.1.0"
