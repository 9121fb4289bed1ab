"""Deterministic simulator for personalized federated learning.

Strategies: FedAvg, FedPer (parameter decoupling), Per-FedAvg (MAML) and
FedMeta-Per, on a split conv/dense model over synthetic video chunks.
"""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
