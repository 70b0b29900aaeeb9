"""Exception types shared across the package."""


class BnnError(Exception):
    """Base class for all errors raised by bnnlab."""


class ShapeError(BnnError, ValueError):
    pass


class NonFiniteError(BnnError, FloatingPointError):
    pass


class FormatError(BnnError, ValueError):
    """Malformed on-disk data (dataset files, model containers)."""


class TraceError(BnnError, RuntimeError):
    """A backward pass asked for buffers the trace did not retain."""


class ConfigError(BnnError, ValueError):
    pass
