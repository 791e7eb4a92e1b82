"""Exception hierarchy shared across the package."""


class StereoSCError(Exception):
    """Base class for all package errors."""


class ConfigError(StereoSCError, ValueError):
    """Invalid configuration or missing input layout."""


class DataError(StereoSCError, ValueError):
    """Malformed input data (labels, images, manifests)."""


class ShapeError(StereoSCError, ValueError):
    """Tensor dimensions violate an operation's contract."""


class StateError(StereoSCError, RuntimeError):
    """An object is used before it is ready (uninitialized params, missing checkpoint)."""


class DetectorError(StereoSCError, RuntimeError):
    """A 2D detector adapter failed."""


class FramingError(StereoSCError, ValueError):
    """Received symbol stream does not match the side-band shapes."""


class DivergenceError(StereoSCError, RuntimeError):
    """Training produced a non-finite loss."""


class PreconditionError(StereoSCError, ValueError):
    """An operation was called without its required inputs."""


class DecoderError(StereoSCError, RuntimeError):
    """A receiver-side component (for example a flow estimator adapter) failed."""
