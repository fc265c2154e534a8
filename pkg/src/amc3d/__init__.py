"""Volumetric classification with a frozen 2D transformer and per-task LoRA plugins."""

__version__ = "0.1.0"
