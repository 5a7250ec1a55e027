"""Fiducial uncertainty quantification for treatment effects.

The package solves heterogeneous-treatment-effect models by imputing the
latent noise of each observation jointly with the weights of an inverse
network that maps observations to model parameters.  Downstream of the
sampler it provides fiducial confidence intervals for average effects,
prediction intervals for individual effects, and a conformalized quantile
regression baseline.
"""

__version__ = "0.1.0"
