"""Numerical toolkit for Gaussian Riesz transforms of non-symmetric Ornstein-Uhlenbeck operators.

Modules
-------
gauss_core   model, covariances ``Q_t``, the flow ``D_t``, polar coordinates
mehler       Mehler kernel and the ``D^alpha`` term ledger in sign/log arithmetic
semigroup    ``H_t`` on test functions, the generator, spectral Riesz potentials
riesz        Riesz kernels, the local cutoff, Riesz operators on test functions
harness      estimate catalog, weak-type profiles, the higher-order counterexample
"""
from . import errors
from .errors import *  # noqa: F401,F403
from .gauss_core import OUModel, Tolerances, build_model, random_model, standard_model

__all__ = ["OUModel", "Tolerances", "build_model", "random_model", "standard_model"] + errors.__all__

__version__ = "0.1.0"
