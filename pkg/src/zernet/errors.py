"""Exception hierarchy shared by all zernet modules.

Every error raised on purpose derives from :class:`ZernetError` so the CLI
can report a single machine-parsable class name.
"""


class ZernetError(Exception):
    """Base class for all library errors."""


class DomainError(ZernetError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class MeshFormatError(ZernetError):
    """Mesh or field file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class PatchTooSparseError(ZernetError):
    """Too few graph nodes inside the patch radius."""

    def __init__(self, vertex, count):
        super().__init__(f"vertex {vertex}: only {count} neighbors inside r0")
        self.vertex = vertex
        self.count = count


class InsufficientSamplesError(ZernetError):
    """Fewer patch samples than basis functions."""


class RankDeficiencyError(ZernetError):
    """Least-squares system has numerical rank below the basis size."""

    def __init__(self, rank, k):
        super().__init__(f"basis matrix has numerical rank {rank} < k={k}")
        self.rank = rank
        self.k = k


class DecompositionError(ZernetError):
    """Too many vertices failed decomposition."""

    def __init__(self, failed, total):
        super().__init__(f"{len(failed)} of {total} vertices failed decomposition")
        self.failed = list(failed)
        self.total = total


class ShapeError(ZernetError, ValueError):
    """Tensor dimensions do not agree."""


class StateError(ZernetError, RuntimeError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class DivergenceError(ZernetError, FloatingPointError):
    """Training loss became non-finite."""


class BundleFormatError(ZernetError):
    """Binary container or bundle has wrong magic or version."""


class CorruptionError(ZernetError):
    """Stored content does not match its recorded hash or length."""


class ConfigError(ZernetError):
    """Invalid or unknown configuration key."""


class OverwriteError(ZernetError):
    """Output exists and overwriting was not requested."""
