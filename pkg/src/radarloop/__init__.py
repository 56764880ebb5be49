"""Loop closure and pose-graph SLAM for directional 4D imaging radar, with a synthetic radar simulator."""

__version__ = "0.1.0"
