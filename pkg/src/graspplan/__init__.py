"""Trajectory planning, online replanning and closed-loop simulation for dynamic grasping."""

__version__ = "0.1.0"
