"""Bayesian inference with a trained generator as the prior.

The posterior is written over the generator's latent space, sampled with
Hamiltonian Monte Carlo and summarised into mean, pixel-wise variance,
MAP field and an out-of-distribution score.
"""

__version__ = "0.1.0"

from .errors import ConfigError, ContractError, DomainError, FormatError, GanPriorError, NonFiniteError, NumericError

__all__ = [
    "__version__",
    "GanPriorError",
    "ConfigError",
    "ContractError",
    "NumericError",
    "DomainError",
    "NonFiniteError",
    "FormatError",
]
