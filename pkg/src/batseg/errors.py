from __future__ import annotations

from os import PathLike


class BatsegError(Exception):
    """Base class for every error raised by batseg."""


class ContractError(BatsegError, ValueError):
    """Inputs with inconsistent shapes or counts."""


class NumericalError(BatsegError, ArithmeticError):
    """A non-finite loss or gradient.

    Carries the offending parameter path and/or training step.
    """

    def __init__(self, message: str, *, path: str | None = None, step: int | None = None):
        self.path = path
        self.step = step
        where = []
        if path is not None:
            where.append(f"parameter {path!r}")
        if step is not None:
            where.append(f"step {step}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class GenerationError(BatsegError):
    """Synthetic sampling exhausted its retries."""


class FormatError(BatsegError):
    """A file that cannot be parsed."""

    def __init__(self, path: str | PathLike, reason: str):
        self.path = path
        super().__init__(f"{path}: {reason}")


class IntegrityError(BatsegError):
    """A dataset whose files do not match its manifest."""

    def __init__(self, path: str | PathLike, reason: str):
        self.path = path
        super().__init__(f"{path}: {reason}")
