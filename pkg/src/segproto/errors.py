"""Exception types shared across the package."""


class SegProtoError(Exception):
    """Base class for all package errors."""


class EmptyInputError(SegProtoError, ValueError):
    pass


class ParseError(SegProtoError, ValueError):
    pass


class DimensionError(SegProtoError, ValueError):
    pass


class NumericError(SegProtoError, FloatingPointError):
    pass


class ConfigError(SegProtoError, ValueError):
    pass


class PreconditionError(SegProtoError, ValueError):
    pass
