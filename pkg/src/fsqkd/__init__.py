"""Free-space BB84 quantum key distribution: link model, simulator, protocol and analysis."""

__version__ = "0.1.0"
