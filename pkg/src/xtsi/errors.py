"""Exception hierarchy shared by every xtsi module."""


class XtsiError(Exception):
    """Base class for all errors raised by xtsi."""


class ParseError(XtsiError, ValueError):
    """A data or configuration file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class ValidationError(XtsiError, ValueError):
    """Loaded or constructed data violates a documented invariant."""


class CoverageError(ValidationError):
    """A tabulated quantity does not cover the requested energy range."""


class DegenerateSpectrumError(ValidationError):
    """A spectrum has no positive intensity after clipping."""


class AlignmentError(XtsiError, ValueError):
    """Arrays or grids that must line up do not."""


class ParameterError(XtsiError, ValueError):
    """A numeric parameter is outside its allowed range."""


class DegenerateBinError(XtsiError, ValueError):
    """An energy bin collects no mean flux."""


class DegenerateCovarianceError(XtsiError, ValueError):
    """A covariance matrix is singular where a non-singular one is required."""


class DecompositionError(XtsiError, ValueError):
    """Cholesky factorisation failed; the matrix is not positive definite."""


class ConsistencyError(XtsiError, ArithmeticError):
    """Bounds that must be ordered came out inverted beyond tolerance."""


class PreconditionError(XtsiError, ValueError):
    """An operation was called on input lacking required structure."""


class ConfigurationError(XtsiError, ValueError):
    """A scenario configuration cannot be realised."""


class SizeError(XtsiError, ValueError):
    """An instance is too large for a brute-force oracle."""
