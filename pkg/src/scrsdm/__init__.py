"""Cascaded face alignment with sparse compositional regressors and binary-approximated SIFT features."""

__version__ = "0.1.0"
