"""Ptychographic phase retrieval with a trained generative prior."""

__version__ = "0.1.0"
