"""Physics-anchored single-pixel imaging: simulation, reconstruction, evaluation."""

__version__ = "0.1.0"
