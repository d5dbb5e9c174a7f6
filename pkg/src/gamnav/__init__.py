"""Graph-attention-memory navigation on a discrete maze."""

__version__ = "0.1.0"
