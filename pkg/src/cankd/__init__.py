"""Cross-attention non-local feature distillation on a numpy autograd core."""

__version__ = "0.1.0"
