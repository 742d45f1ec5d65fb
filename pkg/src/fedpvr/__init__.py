"""Federated optimisation with partial variance reduction (FedPVR).

Simulates FedAvg, FedProx, SCAFFOLD and FedPVR on quadratic, logistic and
MLP client objectives, with drift diagnostics and split conformal prediction.
"""

from .engine import FederatedEngine, Strategy, comm_cost, comm_ratio
from .params import LayerLayout, Mask, mask_from_layer_cutoff, masked

__all__ = [
    "FederatedEngine",
    "LayerLayout",
    "Mask",
    "Strategy",
    "comm_cost",
    "comm_ratio",
    "mask_from_layer_cutoff",
    "masked",
]

__version__ = "0.1.0"
