"""Non-autoregressive real-time accent conversion with voice cloning."""

__version__ = "0.1.0"
