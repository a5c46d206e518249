"""Label-free knowledge distillation on a desk-scale synthetic benchmark."""

__version__ = "0.1.0"
