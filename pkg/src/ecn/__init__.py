"""Patch-based text-line classification with ensembles of conjoined networks."""

__version__ = "0.1.0"
