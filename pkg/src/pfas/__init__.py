"""Channel estimation and antenna-state precoding for pixel-reconfigurable arrays.

Modules
-------
patterns   radiation patterns per antenna state
channel    array geometry, angular grid, scenes and the grid channel model
sounding   uplink sounding, SVD reduction, least squares
omp        shared-support orthogonal matching pursuit
vbi        mask-assisted turbo variational Bayesian estimator
precoding  zero forcing, relaxed state optimization and baselines
harness    Monte-Carlo experiments and CSV output
"""

from .errors import ConfigError, NumericalError, RankDeficientError

__version__ = "0.1.0"

__all__ = ["ConfigError", "NumericalError", "RankDeficientError", "__version__"]
