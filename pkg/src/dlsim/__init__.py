"""Downlink LTE link- and system-level simulator."""

__version__ = "0.1.0"
