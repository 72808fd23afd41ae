"""Online multivalid prediction: calibrated means, moments and prediction intervals."""

from .core import BucketGrid, ConfigError, Example, GroupSystem, Transcript, bucket_index, cover, grid_points

__version__ = "0.1.0"

__all__ = [
    "BucketGrid",
    "ConfigError",
    "Example",
    "GroupSystem",
    "Transcript",
    "bucket_index",
    "cover",
    "grid_points",
]
