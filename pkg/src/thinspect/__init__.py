"""Grasp-constrained pose estimation and pin inspection for through-hole parts."""

__version__ = "0.1.0"
