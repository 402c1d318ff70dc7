"""ForMa: selective-state-space image tampering localization on a small numpy autodiff core."""

from .tensor import Tensor, backward, no_grad, precision, set_precision

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "no_grad", "precision", "set_precision", "__version__"]
