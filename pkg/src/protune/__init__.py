"""protune: desk-scale prompt-block tuning for frozen vision backbones."""

from .autograd import Tensor, no_grad
from .gradcheck import grad_check

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "grad_check", "__version__"]
