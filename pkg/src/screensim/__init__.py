"""screensim: sequential candidate-screening experiments with known ground truth.

The package simulates applicant populations, runs exploitation-only and
exploration-based screening policies under selective-label feedback, and
evaluates them with inverse-propensity weighting and screener-leniency
instrumental variables.
"""

__version__ = "0.1.0"

from .engine import (
    GLMOptions,
    ExperimentLog,
    PolicySpecification,
    run_experiment,
    score_evaluation_cohort,
)
from .evaluation import (
    agreement_table,
    common_support,
    composition_report,
    ipw_yield,
    yield_time_series,
)
from .glm import (
    BonusParams,
    ExplorationBonus,
    L1LogisticRegression,
    PrecisionState,
    balanced_subsample,
    build_precision_state,
    exploration_bonus,
    fit_l1_logistic,
    predict_probability,
    ucb_score,
)
from .iv import (
    LeniencyInstrument,
    balance_check,
    build_instrument,
    complier_outcomes,
    monotonicity_suite,
    two_stage_least_squares,
)
from .metrics import confusion_at_k, roc_auc
from .policies import (
    PolicyScore,
    ScoreTable,
    SelectionResult,
    blind_features,
    human_policy,
    quota_select,
    select_top_k,
    sl_policy,
    ucb_policy,
)
from .population import (
    Applicant,
    DriftSchedule,
    Population,
    PopulationSpec,
    RoundConfig,
    TrainingSet,
    apply_drift,
    default_population_spec,
    generate_population,
    simulate_human_screening,
)

__all__ = [
    "Applicant",
    "BonusParams",
    "DriftSchedule",
    "ExperimentLog",
    "ExplorationBonus",
    "GLMOptions",
    "L1LogisticRegression",
    "LeniencyInstrument",
    "PolicyScore",
    "PolicySpecification",
    "Population",
    "PopulationSpec",
    "PrecisionState",
    "RoundConfig",
    "ScoreTable",
    "SelectionResult",
    "TrainingSet",
    "agreement_table",
    "apply_drift",
    "balance_check",
    "balanced_subsample",
    "blind_features",
    "build_instrument",
    "build_precision_state",
    "common_support",
    "complier_outcomes",
    "composition_report",
    "confusion_at_k",
    "default_population_spec",
    "exploration_bonus",
    "fit_l1_logistic",
    "generate_population",
    "human_policy",
    "ipw_yield",
    "monotonicity_suite",
    "predict_probability",
    "quota_select",
    "roc_auc",
    "run_experiment",
    "score_evaluation_cohort",
    "select_top_k",
    "simulate_human_screening",
    "sl_policy",
    "two_stage_least_squares",
    "ucb_policy",
    "ucb_score",
    "yield_time_series",
]
