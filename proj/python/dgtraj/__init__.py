"""Dynamic Gaussian trajectory-field reconstruction."""

from ._core import (
    classify,
    covariance,
    dct_basis,
    encode,
    evaluate,
    export_trajectories,
    fit_coefficients,
    generate_synthetic,
    gradcheck,
    image_metrics,
    reconstruct,
    render,
    train,
)

__all__ = [
    "classify",
    "covariance",
    "dct_basis",
    "encode",
    "evaluate",
    "export_trajectories",
    "fit_coefficients",
    "generate_synthetic",
    "gradcheck",
    "image_metrics",
    "reconstruct",
    "render",
    "train",
]
