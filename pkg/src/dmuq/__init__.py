"""Bootstrap-plus-direct-modeling uncertainty for collaborative BEV detection."""

__version__ = "0.1.0"
