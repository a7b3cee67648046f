"""implreg: a test bench for the implicit regularization of gradient
descent on deep matrix factorizations and CP tensor factorizations.

The package trains factorized completion models at desk scale, logs
norms, effective rank, determinants and balancedness along the way,
evaluates the closed-form growth/collapse bounds those trajectories
must respect, and reproduces the associated figures from CSV logs.
"""

from . import harness, linalg, matfac, metrics, svgplot, tenfac
from .rng import stream

__all__ = ["harness", "linalg", "matfac", "metrics", "svgplot", "tenfac", "stream"]

__version__ = "0.1.0"
