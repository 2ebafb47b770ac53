"""
Exception hierarchy shared by the services, the CLI and the HTTP routes.

ValidationError covers bad inputs and malformed data; NumericalError covers
failures of the numerical machinery itself (factorizations, solvers,
identifiability).
"""

from typing import Optional

import numpy as np


class MotionModelError(Exception):
    """Base class for every error raised by this package"""


class ValidationError(MotionModelError, ValueError):
    """Invalid input, configuration or dataset"""


class NumericalError(MotionModelError, ArithmeticError):
    """A numerical procedure failed"""


class NotPSDError(NumericalError):
    """A covariance or kernel matrix is not positive semi-definite"""


class InsufficientExcitationError(NumericalError):
    """The data does not excite every parameter of a regression"""


class ConvergenceError(NumericalError):
    """An iterative solver hit its iteration cap"""

    def __init__(self, message: str, last_iterate: Optional[np.ndarray] = None, residual: float = float('nan')):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual
