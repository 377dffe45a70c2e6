"""Foundation-model / expert recommendation stack with streaming weight sync."""

__version__ = "0.1.0"
