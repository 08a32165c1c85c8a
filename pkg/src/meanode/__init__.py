"""meanode - finite-depth ResNet training dynamics and their infinite-depth limits."""

from meanode.config import Settings, SweepSpec, TrainConfig, settings

__version__ = "0.1.0"
__all__ = ["Settings", "SweepSpec", "TrainConfig", "settings"]
