"""Aspect-level sentiment analysis with sparsity- and orthogonality-
constrained attention, trained by a from-scratch reverse-mode autodiff."""

__version__ = "0.1.0"
