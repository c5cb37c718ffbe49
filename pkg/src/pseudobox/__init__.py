"""Class-aware 3D pseudo-box generation from LiDAR fused with image masks and depth maps."""
from .errors import InputError, PseudoBoxError
from .geometry import BevBox, Box3D, CameraModel

__version__ = "0.1.0"

__all__ = ["BevBox", "Box3D", "CameraModel", "InputError", "PseudoBoxError", "__version__"]
