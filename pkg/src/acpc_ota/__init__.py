"""Over-the-air federated learning with adaptive local steps and power control."""

__version__ = "0.1.0"
