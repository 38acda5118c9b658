"""Incremental few-shot object detection with hypernetwork-generated class codes."""

__version__ = "0.1.0"
