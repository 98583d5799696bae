"""Palliative-care screening: 3-12 month mortality prediction from coded event logs."""

__version__ = "0.1.0"
