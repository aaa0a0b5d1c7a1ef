"""Meta-learned re-identification heads for multi-object tracking."""

__version__ = "0.1.0"
