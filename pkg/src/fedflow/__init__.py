"""Federated low-rank-adapter traffic flow forecasting with structured outputs."""

from . import adapter, corridor, evalkit, fedsim, ingest, kernels, promptgen
from .errors import FedFlowError

__version__ = "0.1.0"

__all__ = ["adapter", "corridor", "evalkit", "fedsim", "ingest", "kernels", "promptgen", "FedFlowError"]
