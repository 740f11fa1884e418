"""Exception hierarchy shared across the toolkit.

CLI exit-code contract: ``UsageError`` and file-format problems map to exit
code 2, numerical/degenerate failures to exit code 1.
"""


class SsmsegError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgumentError(SsmsegError, ValueError):
    """An argument violates a documented precondition (non-finite, bad shape, ...)."""


class DegenerateInputError(SsmsegError, ValueError):
    """Input is numerically degenerate (collinear cloud, all-zero map, ...)."""


class MeshTopologyError(SsmsegError, ValueError):
    """Mesh is open, non-manifold, or inconsistently wound."""


class RegistrationError(SsmsegError, RuntimeError):
    """Point-set registration failed (singular system, invalid state)."""


class FileFormatError(SsmsegError, ValueError):
    """Base for persistent-format violations. Subclasses are distinct on purpose."""


class MagicMismatchError(FileFormatError):
    """File magic/version does not identify a supported format."""


class TruncatedFileError(FileFormatError):
    """Payload is shorter than the header promises."""


class HeaderInconsistencyError(FileFormatError):
    """Header fields are mutually inconsistent (dims vs payload length, ...)."""


class ValueRangeError(FileFormatError):
    """Stored values violate the declared kind invariant (probability outside [0,1], ...)."""
