"""Diagnostics raised by the compiler front end and passes."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Loc:
    """A position in a network file. ``line`` and ``col`` are 1-based."""

    line: int
    col: int
    file: str = "<input>"

    def __str__(self) -> str:
        return f"{self.file}:{self.line}:{self.col}"


class CompileError(Exception):
    """Base class for every compile-time diagnostic.

    ``loc`` is optional; when present the message is prefixed with
    ``file:line:col`` so the CLI can print it verbatim.
    """

    kind = "error"

    def __init__(self, message: str, loc: Loc | None = None):
        self.message = message
        self.loc = loc
        super().__init__(str(self))

    def __str__(self) -> str:
        prefix = f"{self.loc}: " if self.loc is not None else ""
        return f"{prefix}{self.kind}: {self.message}"


class NetSyntaxError(CompileError):
    kind = "SyntaxError"

    def __init__(self, message: str, loc: Loc | None = None, expected: tuple[str, ...] = ()):
        self.expected = expected
        if expected:
            message = f"{message} (expected {', '.join(expected)})"
        super().__init__(message, loc)


class DuplicateName(CompileError):
    kind = "DuplicateName"


class UnknownLayerKind(CompileError):
    kind = "UnknownLayerKind"


class UnboundName(CompileError):
    kind = "UnboundName"


class ArityError(CompileError):
    kind = "ArityError"


class ShapeMismatch(CompileError):
    kind = "ShapeMismatch"

    def __init__(self, site: str, expected, found, loc: Loc | None = None, detail: str = ""):
        self.site = site
        self.expected = expected
        self.found = found
        msg = f"at {site}: expected {expected}, found {found}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg, loc)


class NonPositiveExtent(ShapeMismatch):
    kind = "NonPositiveExtent"


class NotDifferentiable(CompileError):
    kind = "NotDifferentiable"


class InvalidSlot(CompileError):
    kind = "InvalidSlot"


class CycleDetected(CompileError):
    kind = "CycleDetected"


class FixpointExceeded(CompileError):
    kind = "FixpointExceeded"


class VerifyError(CompileError):
    kind = "VerifyError"
