"""Small reverse-mode autodiff kernel with the operators the classifier needs."""

from .gradcheck import GradCheckReport, grad_check
from .optim import Adam
from .tensor import NonFiniteError, Tensor, as_tensor

__all__ = ["Adam", "GradCheckReport", "NonFiniteError", "Tensor", "as_tensor", "grad_check"]
