"""Probabilistic slot attention with aggregate slot posteriors.

Modules:

- :mod:`probslot.gmm` diagonal Gaussian mixtures, aggregate posterior,
  concatenated slot mixture
- :mod:`probslot.psa` the slot routing iterations
- :mod:`probslot.autodiff` reverse-mode differentiation on numpy arrays
- :mod:`probslot.nets` encoder/decoder networks, Adam, training
- :mod:`probslot.metrics` SMCC, R², ARI, compositional contrast
- :mod:`probslot.synthdata` synthetic point-set scenes
- :mod:`probslot.harness` CLI and experiment commands
"""

from .errors import ContractError, NumericalError, UnsupportedSizeError

__version__ = "0.1.0"

__all__ = ["ContractError", "NumericalError", "UnsupportedSizeError", "__version__"]
