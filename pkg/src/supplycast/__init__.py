"""Forecasting next-month supply chain disruption shocks from news and index history."""

__version__ = "0.1.0"
