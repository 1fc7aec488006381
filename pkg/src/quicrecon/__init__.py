"""Reconnaissance and traffic-share analysis toolkit for legacy gQUIC."""

__version__ = "0.1.0"
