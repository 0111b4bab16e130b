"""Federated learning pipeline for multi-site surgical-complication
risk prediction on synthetic, non-IID electronic-health-record cohorts."""

__version__ = "0.1.0"

__all__ = ["__version__"]
