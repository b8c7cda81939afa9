"""Demand estimation and counterfactual forecasting for school-choice markets."""

__version__ = "0.1.0"
