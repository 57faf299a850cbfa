"""Exception hierarchy shared by the solver, the checks and the CLI.

Verdicts that fail are reported as data. Exceptions are reserved for inputs
that make a computation meaningless.
"""
from __future__ import annotations

from typing import Optional


class CoagError(Exception):
    """Base class for every error raised by coagstat."""


class DomainError(CoagError, ValueError):
    """Argument outside the domain of an operation (non-positive size, bad range)."""


class DivergenceError(CoagError, ArithmeticError):
    """A requested moment of a source diverges."""


class NumericalError(CoagError, FloatingPointError):
    """NaN or overflow appeared in the rates; the run is aborted."""


class NotSteadyError(CoagError):
    """A steady-state check received a distribution that is not stationary."""


class InapplicableError(CoagError):
    """A check was requested outside the parameter range where it holds."""


class ConfigError(CoagError):
    """Invalid configuration document.

    ``line`` is the 1-based line of the offending key when it can be located.
    """

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.message = message
        self.path = path
        self.line = line
        super().__init__(self.__str__())

    def __str__(self) -> str:
        where = self.path or "<config>"
        if self.line is not None:
            where = f"{where}:{self.line}"
        return f"{where}: {self.message}"
