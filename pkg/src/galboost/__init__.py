"""Galilean covariance diagnostics for Caldeira-Leggett reduced dynamics.

Modules
-------
core        value types, spectral densities, bath discretization, Gaussian states
oracle      exact composite Gaussian dynamics (system plus discrete bath)
hpz         time-local master equation coefficients from oracle moments
symmetry    translation, time-shift and boost covariance defects
bath        kernels, fluctuation-dissipation checks, figures of merit
stochastic  wavefunction unraveling of the reduced dynamics
config, cli batch configuration and command line front-end
"""
from .core import (CoefficientTrace, DiscreteBath, GaussianState, SpectralDensity, SystemParams,
                   ValidationError, discretize)
from .oracle import CompositeModel

__version__ = "0.1.0"

__all__ = ["CoefficientTrace", "CompositeModel", "DiscreteBath", "GaussianState", "SpectralDensity",
           "SystemParams", "ValidationError", "discretize"]
