"""Disentangled dynamics benchmark: simulators, datasets, forecasters and evaluation."""

import json as _json

from . import _core
from ._core import (
    ConfigError,
    Error,
    cli,
    factor_names,
    generate_split,
    integrate,
    kl_term,
    mae_at,
    read_dataset,
    reconstruction_nll,
    rollout,
    sd_loss,
)

__all__ = [
    "ConfigError",
    "Error",
    "Model",
    "cli",
    "factor_names",
    "generate_split",
    "integrate",
    "kl_term",
    "mae_at",
    "read_dataset",
    "reconstruction_nll",
    "rollout",
    "sd_loss",
]


class Model(_core.Model):
    """A forecaster built from a spec dict, e.g. {"family": "vae_sd", "system": "pendulum"}."""

    def __init__(self, spec):
        if not isinstance(spec, str):
            spec = _json.dumps(spec)
        super().__init__(spec)

    @property
    def spec(self):
        return _json.loads(self.spec_json)
