"""Exact and learned denoising diffusion and flow matching on Dirac-mixture targets."""

from .core import BaseDistribution, DiracMixture, make_dataset
from .errors import ConfigError, DifflabError, DomainError, NumericalError
from .rng import RngStream
from .schedule import Schedule

__version__ = "0.1.0"

__all__ = ["BaseDistribution", "ConfigError", "DiracMixture", "DifflabError", "DomainError",
           "NumericalError", "RngStream", "Schedule", "make_dataset"]
