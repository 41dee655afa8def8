"""
fleetwatch: faulty-machine detection for distributed training telemetry.
"""

__version__ = "1.0.0"

__all__ = ["__version__"]
