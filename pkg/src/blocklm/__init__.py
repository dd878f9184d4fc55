"""Sparse Levenberg-Marquardt for bundle adjustment and pose-graph optimisation.

Modules: :mod:`~blocklm.lie` (SE(3) on ``[t | q]`` arrays), :mod:`~blocklm.trace`
(sparse reverse-mode Jacobians), :mod:`~blocklm.sparse` (block-sparse kernels),
:mod:`~blocklm.linsolve` (Cholesky and PCG), :mod:`~blocklm.optim` (the LM
driver), :mod:`~blocklm.problems` (residual models) and
:mod:`~blocklm.io_bench` (parsers and synthetic scenes).
"""

from .errors import (CheiralityError, InvalidArgumentError, NotSPDError, NumericalBreakdownError,
                     ParseError, UnsupportedOperationError)
from .optim import LmConfig, LmReport, optimize

__all__ = ["CheiralityError", "InvalidArgumentError", "LmConfig", "LmReport", "NotSPDError",
           "NumericalBreakdownError", "ParseError", "UnsupportedOperationError", "optimize"]
__version__ = "0.1.0"
