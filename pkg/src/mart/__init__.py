"""Missing-aware transformer representation learning for sparse multivariate time series."""

__version__ = "0.1.0"
