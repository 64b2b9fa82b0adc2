"""Latent Gaussian hierarchical models for glaciological source separation.

SPDE Matérn fields on triangular meshes, spatio-temporal process priors,
point and footprint observation operators, and sparse-precision Gaussian
inference with Metropolis-within-Gibbs over hyperparameters.
"""

__version__ = "0.1.0"
