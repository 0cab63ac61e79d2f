"""Cervical cytology nucleus detection."""

__version__ = "0.1.0"
