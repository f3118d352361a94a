"""Relation-enhanced attention recurrent trend forecasting."""

__version__ = "0.1.0"
