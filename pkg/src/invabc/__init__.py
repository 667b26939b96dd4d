"""Image-summary ABC toolkit: VAE summary statistics, LSSVR surrogate and adaptive population Monte Carlo."""

__version__ = "0.1.0"
