"""Elastic decision transformer: return-conditioned sequence modeling for
offline RL with an inference-time search over history lengths."""

__version__ = "0.1.0"
