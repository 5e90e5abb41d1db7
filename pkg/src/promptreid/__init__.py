"""Multi-prompt person re-identification at desk scale."""

from .autodiff import GradientTape, Parameter, Tensor

__all__ = ["GradientTape", "Parameter", "Tensor"]

__version__ = "0.1.0"
