"""Exception hierarchy shared across the package."""

from __future__ import annotations


class RoadDistressError(Exception):
    """Base class for all package errors."""


class InvalidBox(RoadDistressError, ValueError):
    """Box coordinates violate the ordering or finiteness invariants."""


class DegenerateBox(InvalidBox):
    """Clipping a box to the image collapsed it to zero area."""


class UnknownClass(RoadDistressError, ValueError):
    pass


class UnknownView(RoadDistressError, KeyError):
    def __str__(self) -> str:
        # KeyError quotes its argument; we want a readable message
        return str(self.args[0]) if self.args else ""


class ConfidenceOutOfRange(RoadDistressError, ValueError):
    pass


class ParseError(RoadDistressError, ValueError):
    """Input file could not be parsed.

    Carries the offending file and, where known, the line number or
    element name so CLI users can locate the problem.
    """

    def __init__(self, message: str, path: str | None = None, where: str | None = None):
        self.path = path
        self.where = where
        parts = [p for p in (path, where) if p]
        prefix = ":".join(parts)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class MissingCountry(RoadDistressError, ValueError):
    pass


class MalformedExif(RoadDistressError, ValueError):
    pass
