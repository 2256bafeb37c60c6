"""Pump-event detection on hourly crypto-token panels with spatio-temporal
graph networks built on a small numpy autodiff core."""

__version__ = "0.1.0"
