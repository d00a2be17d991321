"""stratmix: contact matrices stratified by age and categorical features.

Infers contact intensity surfaces from survey counts under hard
reciprocity and consistency constraints, predicts complete matrices from
partially observed data via sharp contingency-table bounds, and
benchmarks against a bootstrap sample-mean baseline on synthetic surveys.
"""

from .domain import (AgeGrid, ContactMatrixSet, DataError, FeatureSpec,
                     PopulationTable, StrataSpace, SurveyRecords, SurveyTensor,
                     aggregate_intensity, aggregate_survey, intensity_to_rate,
                     rate_to_intensity)
from .inference import (FitConfig, FitResult, PosteriorSamples,
                        VariationalState, fit, one_cycle_lr, sample_posterior)
from .model import (LogJoint, ModelSpec, beta0_center, log_joint_and_grad,
                    nb_logpmf)
from .prediction import (AttributableFractions, MixingBounds, PredictionResult,
                         mixing_bounds, ngm_r0, predict_complete,
                         truncated_beta_sample, truncated_dirichlet_sample)
from .simulation import (GroundTruth, ScenarioConfig, default_templates,
                         simulate_scenario)

__version__ = "0.1.0"

__all__ = [
    "AgeGrid", "AttributableFractions", "ContactMatrixSet", "DataError",
    "FeatureSpec", "FitConfig", "FitResult", "GroundTruth", "LogJoint",
    "MixingBounds", "ModelSpec", "PopulationTable", "PosteriorSamples",
    "PredictionResult", "ScenarioConfig", "StrataSpace", "SurveyRecords",
    "SurveyTensor", "VariationalState", "aggregate_intensity",
    "aggregate_survey", "beta0_center", "default_templates", "fit",
    "intensity_to_rate", "log_joint_and_grad", "mixing_bounds", "nb_logpmf",
    "ngm_r0", "one_cycle_lr", "predict_complete", "rate_to_intensity",
    "sample_posterior", "simulate_scenario", "truncated_beta_sample",
    "truncated_dirichlet_sample",
]
