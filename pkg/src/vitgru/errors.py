"""Exception types shared across the package."""


class VitGruError(Exception):
    """Base class for all package errors."""


class ShapeError(VitGruError):
    """Operand shapes violate an operation's contract."""


class GraphError(VitGruError):
    """Tape misuse: wrong tape, consumed tape, or non-recording backward."""


class NumericError(VitGruError):
    """A computation produced or met a non-finite value."""


class DataError(VitGruError):
    """Dataset contents or labels violate a precondition."""


class LoadError(VitGruError):
    """An archive cannot be applied to the target parameters."""


class FormatError(VitGruError):
    """A file is not a valid archive (bad magic, truncation, corrupt manifest)."""


class ConfigError(VitGruError):
    """Configuration is malformed or contains unknown/invalid fields."""


class StateError(VitGruError):
    """Optimizer state is inconsistent with the parameter set."""
