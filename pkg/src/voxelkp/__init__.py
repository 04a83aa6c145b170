"""Fully sparse 3D human keypoint estimation from LiDAR-style point clouds."""

__version__ = "0.1.0"
