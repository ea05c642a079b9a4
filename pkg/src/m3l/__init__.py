"""Memory-based multi-source meta-learning for domain generalization, at desk scale."""

__version__ = "0.1.0"
