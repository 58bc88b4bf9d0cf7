from .causal import (CausalForestModel, NoOverlapError, fit_causal_forest, predict_propensity,
                     predict_tau)
from .config import ForestConfig, N_COVARIATES
from .regression import RegressionForest, fit_regression_forest
from .trimming import TrimResult, trim_by_propensity

__all__ = [
    "CausalForestModel", "ForestConfig", "N_COVARIATES", "NoOverlapError", "RegressionForest",
    "TrimResult", "fit_causal_forest", "fit_regression_forest", "predict_propensity",
    "predict_tau", "trim_by_propensity",
]
