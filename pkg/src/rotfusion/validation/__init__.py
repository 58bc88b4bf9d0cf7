"""Leave-one-site-out validation (``rotfusion.validation.loocv``) and cluster
bootstrap inference."""
from .bootstrap import STATISTICS, BootstrapResult, cluster_bootstrap

__all__ = ["STATISTICS", "BootstrapResult", "cluster_bootstrap"]
