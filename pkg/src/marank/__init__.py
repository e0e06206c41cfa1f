"""Metric-agnostic ranking optimisation: black-box metric simulation, offline
surrogate metric models, stochastic ranking policies and uncertainty-driven
data collection."""

__version__ = "0.1.0"
