"""Privacy-preserving distributed identification of linear input-output models."""

__version__ = "0.1.0"
