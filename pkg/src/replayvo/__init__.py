"""Online self-supervised visual odometry with a diversity replay buffer."""

__version__ = "0.1.0"
