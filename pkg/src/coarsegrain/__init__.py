"""Coarse-graining tensor-product features with tree tensor networks."""

__version__ = "0.1.0"
