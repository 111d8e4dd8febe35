"""Two-party vertical federated gradient boosting."""

__version__ = "0.1.0"
