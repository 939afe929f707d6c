"""Sliding-window fusion of IMU preintegration, odometry displacements and body-offset UWB ranges."""

__version__ = "0.1.0"
