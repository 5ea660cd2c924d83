"""Energy-correlated X-ray measurement model and task-specific information bounds."""

__version__ = "0.1.0"
