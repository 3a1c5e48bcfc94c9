"""rankcore: ranking-preserving core-set selection for pairwise-interaction
benchmarking on multivariate time series."""

__version__ = "0.1.0"
