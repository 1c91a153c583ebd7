"""XNorm linear attention toolkit: Python front end to the C++ core."""

import json

from ._xvit import (
    AttentionParams,
    ConfigError,
    DataError,
    DivergedError,
    Error,
    LoadError,
    Model,
    ModelConfig,
    ShapeError,
    __version__,
    assoc_check,
    attention,
    attention_flops,
    cli,
    config_names,
    count_flops,
    count_params,
    fit_power_law,
    run_bench,
    train_toy,
)
from ._xvit import config as _config
from ._xvit import gradcheck as _gradcheck


def config(name_or_path):
    """Model config as a dict."""
    return json.loads(_config(name_or_path))


def gradcheck(config="nano", seed=42, tol=1e-5, samples=100):
    """Gradient check report as a dict."""
    return json.loads(_gradcheck(config, seed, tol, samples))
