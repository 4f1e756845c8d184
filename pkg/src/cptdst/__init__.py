"""Continual prompt tuning for dialog state tracking on a desk-scale numpy stack."""

__version__ = "0.1.0"
