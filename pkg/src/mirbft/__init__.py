"""Multi-leader BFT total-order broadcast with a deterministic simulator."""

from .params import ProtocolParams, validate

__version__ = "0.1.0"
__all__ = ["ProtocolParams", "validate", "__version__"]
