"""Travel speed estimation that combines a learned recurrent prior with
conjugate Bayesian updates over historical speed records."""

__version__ = "0.1.0"
