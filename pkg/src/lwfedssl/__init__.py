"""Layer-wise federated self-supervised learning simulator."""

__version__ = "0.1.0"
