"""Exception types raised by the solvers."""


class QvarError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(QvarError, ValueError):
    """A parameter set violates its invariants."""


class BracketError(QvarError, ArithmeticError):
    """A root could not be bracketed."""


class NonFiniteIntegrandError(QvarError, FloatingPointError):
    """An integrand returned NaN or an infinity at a quadrature node."""


class CaseMismatchError(QvarError, ValueError):
    """A concavification formula was requested outside the case it belongs to."""


class RangeError(QvarError, ValueError):
    """The target lies outside the range of a monotone function."""


class DivergenceError(QvarError, ArithmeticError):
    """An iterative solver left its admissible region."""


class TrainingError(QvarError, FloatingPointError):
    """Network training produced a non-finite loss."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot
