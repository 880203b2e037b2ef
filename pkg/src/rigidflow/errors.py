"""Exception hierarchy shared by all rigidflow modules.

The CLI maps ValidationError to exit code 2 and NumericalError to exit
code 3; everything else is a genuine bug and propagates.
"""


class RigidflowError(Exception):
    """Base class for all rigidflow errors."""


class ValidationError(RigidflowError, ValueError):
    """Inconsistent shapes, broken invariants, or malformed inputs."""


class BehindCameraError(ValidationError):
    """A point with Z <= 0 was passed to a perspective projection."""


class MissingTensorError(ValidationError):
    """A dataset manifest names a tensor file that does not exist."""


class ShapeMismatchError(ValidationError):
    """A tensor file's byte length disagrees with its manifest shape."""


class DtypeMismatchError(ValidationError):
    """A tensor is declared with an unsupported dtype or byte order."""


class NumericalError(RigidflowError, ArithmeticError):
    """A computation produced non-finite values or failed to make progress."""
