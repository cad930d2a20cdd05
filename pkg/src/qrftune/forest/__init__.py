from .engine import (
    Forest,
    NeverOOBError,
    TreeNode,
    fit_forest,
    oob_cdf,
    oob_mean_prediction,
    predict_cdf,
    theta_seed,
)

__all__ = [
    "Forest",
    "NeverOOBError",
    "TreeNode",
    "fit_forest",
    "oob_cdf",
    "oob_mean_prediction",
    "predict_cdf",
    "theta_seed",
]
