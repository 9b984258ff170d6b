"""Global-local encoder-decoder semantic segmentation for remote sensing imagery."""

from .config import (ABLATIONS, IGNORE_INDEX, ModelConfig, RunSpec,
                     default_config, default_run_spec, load_config_file,
                     validate_config)
from .network import RemoteNet, build_network, make_variant
from .params import ParamStore, init_params

__all__ = [
    "ABLATIONS",
    "IGNORE_INDEX",
    "ModelConfig",
    "ParamStore",
    "RemoteNet",
    "RunSpec",
    "build_network",
    "default_config",
    "default_run_spec",
    "init_params",
    "load_config_file",
    "make_variant",
    "validate_config",
]

__version__ = "0.1.0"
