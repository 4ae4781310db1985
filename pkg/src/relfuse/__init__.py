"""Reliability-aware RGB/IR fusion with a framework-free autodiff core."""

__version__ = "0.1.0"
