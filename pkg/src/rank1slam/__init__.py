"""Rank-1 factorization visual odometry and multi-stage L1 pose-graph optimization."""
__version__ = "0.1.0"
