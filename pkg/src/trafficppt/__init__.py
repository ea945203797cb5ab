"""Trajectory recovery and per-road traffic volume estimation."""

__version__ = "0.1.0"
