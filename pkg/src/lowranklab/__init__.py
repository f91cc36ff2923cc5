"""lowranklab: predict low-rank compression degradation from weight spectra.

The package computes spectral predictors (stable rank, effective rank,
energy ranks, dataset entropy), an MDL bits-per-parameter estimate from
BF16 bit fields, four SVD-based compressors, a template/discovered formula
catalog fit by leave-one-out cross-validation, genetic-programming formula
search, and a suite of synthetic verification experiments.
"""

__version__ = "0.1.0"

from .errors import DataError, DegeneracyError

__all__ = ["DataError", "DegeneracyError", "__version__"]
