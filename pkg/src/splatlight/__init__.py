"""splatlight: insert Gaussian-splat objects into splat scenes and correct
their appearance with diffusion-guided color/SH optimization."""

from . import (
    bridge_client,
    gauss_model,
    guidance,
    imgio,
    mesh_sampling,
    metrics_eval,
    personalize,
    relight_opt,
    sh,
    splat_render,
)
from .errors import SplatlightError

__version__ = "0.1.0"

__all__ = [
    "SplatlightError",
    "bridge_client",
    "gauss_model",
    "guidance",
    "imgio",
    "mesh_sampling",
    "metrics_eval",
    "personalize",
    "relight_opt",
    "sh",
    "splat_render",
]
