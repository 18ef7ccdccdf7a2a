"""Exception hierarchy.

Everything derived from :class:`FlatcacheError` is a user-facing error: the
CLI prints its message and exits 1.  Anything else escaping is a bug (exit 2).
"""


class FlatcacheError(Exception):
    pass


class UsageError(FlatcacheError):
    """An API or CLI call that violates a precondition."""


class RecipeError(FlatcacheError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StoreError(FlatcacheError):
    pass


class CorruptionError(StoreError):
    """Stored data is missing or inconsistent."""


class IntegrityError(FlatcacheError):
    """Downloaded or loaded bytes do not match their digest."""


class LockError(FlatcacheError):
    pass


class BuildError(FlatcacheError):
    def __init__(self, message, output=""):
        self.output = output
        super().__init__(message)


class PathTraversalError(FlatcacheError):
    pass
