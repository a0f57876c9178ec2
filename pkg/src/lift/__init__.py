"""Fully sparse INT8 inference engine and hardware-budget analysis
toolkit for pillar-based LiDAR 3D object detection."""

__version__ = "0.1.0"

from .config import EngineConfig, load_config
from .network import DetectionBox, NetworkConfig
from .pillarizer import GridConfig
from .quant import QuantParams

__all__ = ["EngineConfig", "load_config", "DetectionBox", "NetworkConfig",
           "GridConfig", "QuantParams", "__version__"]
