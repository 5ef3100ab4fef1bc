"""Exception hierarchy shared by every stage of the pipeline."""


class SurrosegError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InvalidParameter(SurrosegError, ValueError):
    exit_code = 1


class InvalidData(SurrosegError, ValueError):
    exit_code = 2


class InvalidPartition(SurrosegError, ValueError):
    exit_code = 2


class FormatError(SurrosegError, ValueError):
    exit_code = 2


class UnsupportedDimension(SurrosegError, ValueError):
    exit_code = 1


class GraphDisconnected(SurrosegError):
    """Raised when an operation needs a connected graph and gets several components."""

    exit_code = 2

    def __init__(self, components, message=None):
        self.components = [sorted(c) for c in components]
        if message is None:
            sizes = [len(c) for c in self.components]
            heads = [c[0] for c in self.components[:5]]
            message = (
                f"graph has {len(self.components)} connected components "
                f"(sizes {sizes[:5]}{'...' if len(sizes) > 5 else ''}, "
                f"smallest ids {heads})"
            )
        super().__init__(message)


class NumericalError(SurrosegError, ArithmeticError):
    exit_code = 3


class ResourceError(SurrosegError, MemoryError):
    exit_code = 3


class BudgetExceeded(SurrosegError):
    """Branch-and-bound ran out of nodes; ``incumbent`` holds the best partition found."""

    exit_code = 4

    def __init__(self, message, incumbent=None):
        super().__init__(message)
        self.incumbent = incumbent
