"""Binary neural networks trained with backpropagation and local alternatives."""

__version__ = "0.1.0"
