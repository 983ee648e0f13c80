"""Weight-tied equilibrium dynamics that represent set-valued solution maps."""
from .errors import BifurcateError

__version__ = "0.1.0"
__all__ = ["BifurcateError", "__version__"]
