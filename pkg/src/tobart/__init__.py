"""Tobit Bayesian additive regression trees for censored outcomes."""

__version__ = "0.1.0"
