"""Open-world graph learning: rejection, annotation, and retraining."""

__version__ = "0.1.0"
