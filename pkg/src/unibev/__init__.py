"""Unified spatio-temporal BEV fusion at desk scale."""

__version__ = "0.1.0"
