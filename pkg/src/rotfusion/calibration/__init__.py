from .calibrate import (AdditiveCalibrationFit, CalibrationError, CalibrationRow,
                        MixedCalibrationFit, fit_additive_calibration, fit_mixed_calibration,
                        predict_additive, predict_calibrated, read_rows, write_rows)
from .reml import MixedModelResult, RemlError, fit_reml

__all__ = [
    "AdditiveCalibrationFit", "CalibrationError", "CalibrationRow", "MixedCalibrationFit",
    "MixedModelResult", "RemlError", "fit_additive_calibration", "fit_mixed_calibration",
    "fit_reml", "predict_additive", "predict_calibrated", "read_rows", "write_rows",
]
