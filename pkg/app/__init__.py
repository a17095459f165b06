"""topotrack: merge-tree anchor points, partial fused Gromov-Wasserstein matching and
cloud-system trajectories for time-varying 2D scalar fields."""

__version__ = "0.1.0"


class TopoTrackError(Exception):
    """Base class for every error raised by the tracking pipeline."""
