"""Lidar-inertial odometry and mapping on an incremental multi-scale surfel octree."""

__version__ = "0.1.0"
