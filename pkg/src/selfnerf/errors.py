"""Exception types shared across the package."""


class SelfNeRFError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(SelfNeRFError, ValueError):
    """Invalid configuration value or combination."""


class NumericalError(SelfNeRFError, FloatingPointError):
    """A loss or gradient became non-finite."""


class DatasetError(SelfNeRFError, ValueError):
    """Base class for dataset validation failures."""


class MissingFileError(DatasetError):
    pass


class SizeMismatchError(DatasetError):
    pass


class VertexCountMismatchError(DatasetError):
    pass


class MaskError(DatasetError):
    pass


class CameraError(DatasetError):
    pass


class CheckpointError(SelfNeRFError, ValueError):
    pass
