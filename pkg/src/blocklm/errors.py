"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    pass


class UnsupportedOperationError(TypeError):
    """Raised when a traced value flows through an operation without a registered derivative."""


class NotSPDError(ArithmeticError):
    """Cholesky hit a non-positive pivot."""

    def __init__(self, pivot_index, pivot_value):
        super().__init__(f"matrix is not positive definite: pivot {pivot_index} = {pivot_value:.3e}")
        self.pivot_index = pivot_index
        self.pivot_value = pivot_value


class NumericalBreakdownError(ArithmeticError):
    pass


class CheiralityError(ValueError):
    """A point projects from behind (or onto) the image plane."""

    def __init__(self, rows, message=None):
        rows = [int(r) for r in rows]
        self.rows = rows
        shown = ", ".join(map(str, rows[:8])) + (" ..." if len(rows) > 8 else "")
        super().__init__(message or f"point behind camera for observation(s) {shown}")


class ParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)
