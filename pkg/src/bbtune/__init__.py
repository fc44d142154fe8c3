"""Zeroth-order black-box prompt tuning with output-feature adapters."""

__version__ = "0.1.0"
