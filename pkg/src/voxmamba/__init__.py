"""Hybrid CNN / selective-scan 3D segmentation, in numpy.

The package is layered bottom-up: ``tensor`` (autodiff) -> ``functional``
and ``nn`` (layers) -> ``paths`` and ``selective_scan`` -> ``blocks`` ->
``network``; ``pipeline``, ``training`` and ``metrics`` sit on top and the
``cli`` binds them together.
"""
from .network import Model, ModelConfig, build_model, count_parameters
from .paths import enumerate_paths, serpentine_path, verify_paths
from .tensor import Tensor, no_grad

__all__ = ["Model", "ModelConfig", "Tensor", "build_model", "count_parameters", "enumerate_paths",
           "no_grad", "serpentine_path", "verify_paths"]
__version__ = "0.1.0"
