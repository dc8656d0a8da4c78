"""Generative recall + dense rerank retrieval engine over multi-view semantic IDs."""

__version__ = "0.1.0"
