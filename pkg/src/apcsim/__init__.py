"""Activation performance counters for neural-network inference, DeepFool attacks,
and trace-based adversarial-input detection.

Modules: ``tensor`` (float64 layers and gradients), ``network`` (models and
training), ``apc`` (counters and trace records), ``attack`` (DeepFool),
``tanto`` (detectors and streaming monitoring) and ``cli``.
"""
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
