"""Continual detection and learning of novel presentation attacks.

Novel attacks are flagged as samples outside the fitted embedding distribution
(two-component GMM + shell-sampled negatives + ternary head); the model is then
updated by experience replay with an embedding-drift penalty.
"""

from nacl_pad._backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
