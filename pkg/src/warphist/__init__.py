"""Toy camera control for a history-conditioned video model: camera-induced
warps are fed to the model as ordinary visual history.
"""
from ._kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
