"""Exception types shared across the runtime.

Every error carries the CLI exit code it maps to (0 ok, 2 usage, 3 not
found, 10 privilege, 11 step failed, 12 duplicate/registry conflict,
13 lock busy, 14 stage failure; everything else exits 1).
"""


class CueError(Exception):
    exit_code = 1


class MalformedPath(CueError):
    """Path is not a normalized absolute path."""

    exit_code = 2


class InvalidConfig(CueError):
    """A container config invariant is violated; names the first bad field."""

    exit_code = 2

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class AbsentParent(CueError):
    """Target's parent directory does not resolve in the merged view."""


class AbsentPath(CueError):
    """Path present in neither layer."""


class HiddenPath(CueError):
    """A lower-layer node exists but is masked by the upper layer."""


class NotADirectory(CueError):
    """A non-directory node sits where a directory is required."""


class IsADirectory(CueError):
    """Operation not applicable to the root directory / a directory."""


class DirectoryNotEmpty(CueError):
    """remove of a non-empty directory without the recursive flag."""


class ReservedName(CueError):
    """Path component collides with the sandbox whiteout marker namespace."""


class ReadOnlyView(CueError):
    """Write attempted through a read-only or masked view."""


class StageFailure(CueError):
    """Merge staging failed; the lower layer was not touched."""

    exit_code = 14


class InsufficientSpace(CueError):
    exit_code = 14


class NotFound(CueError):
    exit_code = 3


class CommandNotFound(CueError):
    exit_code = 3


class Duplicate(CueError):
    exit_code = 12


class RegistryConflict(CueError):
    """Two executions competing for the same writable upper layer."""

    exit_code = 12


class LockBusy(CueError):
    exit_code = 13


class WouldBlock(LockBusy):
    """Non-blocking lock acquisition failed."""


class StorageFailure(CueError):
    pass


class SharedStorageUnavailable(CueError):
    pass


class PrivilegeRequired(CueError):
    exit_code = 10


class StepFailed(CueError):
    exit_code = 11

    def __init__(self, ordinal: int, reason: str):
        super().__init__(f"step {ordinal} failed: {reason}")
        self.ordinal = ordinal
        self.reason = reason
