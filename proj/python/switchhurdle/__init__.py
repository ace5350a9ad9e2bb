"""Python bindings for the Switch-Hurdle forecaster."""

from ._switchhurdle import (
    DataError,
    Forecaster,
    croston_forecast,
    generate_synthetic,
    hurdle_cdf,
    hurdle_log_pmf,
    hurdle_mean,
    hurdle_quantile,
    lambda_decay,
    load_dataset,
    mase,
    naive_forecast,
    nb_zero_prob,
    rmse,
    rmsse,
    wape,
)

__all__ = [
    "DataError",
    "Forecaster",
    "croston_forecast",
    "generate_synthetic",
    "hurdle_cdf",
    "hurdle_log_pmf",
    "hurdle_mean",
    "hurdle_quantile",
    "lambda_decay",
    "load_dataset",
    "mase",
    "naive_forecast",
    "nb_zero_prob",
    "rmse",
    "rmsse",
    "wape",
]
