"""Exception hierarchy shared by every module of the package."""


class IlasrError(Exception):
    """Base class for all package errors."""


class ShapeError(IlasrError, ValueError):
    pass


class DomainError(IlasrError, ValueError):
    """An input lies outside an operation's mathematical domain."""


class GraphError(IlasrError, RuntimeError):
    """Misuse of the differentiation graph (non-scalar root, consumed graph, ...)."""


class InfeasibleAlignmentError(IlasrError, ValueError):
    pass


class ConfigError(IlasrError, ValueError):
    pass


class DataFormatError(IlasrError, ValueError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalAbort(IlasrError, RuntimeError):
    pass
