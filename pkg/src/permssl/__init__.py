"""Self-supervised audio representations from patch permutations with
differentiable ranking."""

__version__ = "0.1.0"
