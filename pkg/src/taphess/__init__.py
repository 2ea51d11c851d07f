"""Conditional TAP iteration for the SK model, the TAP Hessian, and its free-probability spectrum."""

__version__ = "0.1.0"
