"""Double-well networks for binary image segmentation."""
from ._backend import BACKEND
from .doublewell import Activation, DoubleWellParams
from .models import build_dn1, build_dn2, forward
from .unet import UNetConfig, param_count

__version__ = "0.1.0"

__all__ = ["BACKEND", "Activation", "DoubleWellParams", "UNetConfig", "build_dn1", "build_dn2",
           "forward", "param_count", "__version__"]
