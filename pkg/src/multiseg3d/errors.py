"""Exception hierarchy shared across the package.

ContractError covers violated preconditions/invariants; the CLI maps any
MultisegError to exit code 1 (usage errors exit 2 via argparse).
"""


class MultisegError(Exception):
    """Base class for all package-specific failures."""


class ContractError(MultisegError):
    """A documented precondition or invariant was violated by the caller."""


class ShapeError(ContractError):
    """Operands with incompatible shapes; message names the operation."""


class NumericError(MultisegError):
    """Non-finite value produced where finiteness is part of the contract."""


class PlacementError(MultisegError):
    """Scene recipe could not be realised without object overlap."""


class AmbiguityError(MultisegError):
    """No uniquely-resolving referring expression exists for the target."""


class InstanceLookupError(ContractError, LookupError):
    """Requested instance id does not exist in the scene."""


class SceneFormatError(MultisegError):
    """Malformed scene/checkpoint file. ``offset`` is the byte position."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(SceneFormatError):
    """File declares a format version this build does not read."""
