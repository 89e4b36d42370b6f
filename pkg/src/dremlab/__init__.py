"""Dense reward learning from backward-sampled task progress, with a pixel SAC testbed."""

__version__ = "0.1.0"
