"""Joint low-rank and sparse Bayesian beam-domain channel estimation."""
__version__ = "0.1.0"
