"""Motion-aware multi-scan LiDAR semantic segmentation at desk scale."""

__version__ = "0.1.0"
