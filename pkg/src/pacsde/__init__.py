"""Hybrid Bayesian neural SDEs with a PAC-Bayes-regularized training objective."""

__version__ = "0.1.0"
