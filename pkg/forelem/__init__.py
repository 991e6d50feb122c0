"""Tuple-based loop IR: programs, executor, transformations and replica exchange."""

__version__ = "0.1.0"
