"""Causal-forest, paired-experiment and mixed-model calibration estimates of
crop rotation effects on yield."""

__version__ = "0.1.0"
