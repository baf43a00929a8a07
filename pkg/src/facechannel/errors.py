"""Exception hierarchy shared across the package."""


class FaceChannelError(Exception):
    """Base class for all package errors."""


class SchemaError(FaceChannelError):
    """A manifest or config file is missing a required field."""


class LabelRangeError(FaceChannelError, ValueError):
    """A label falls outside [-1, 1]."""


class DecodeError(FaceChannelError):
    """An image file could not be decoded."""

    def __init__(self, path, reason=""):
        self.path = str(path)
        super().__init__(f"cannot decode image {self.path}" + (f": {reason}" if reason else ""))


class EmptyDatasetError(FaceChannelError, ValueError):
    pass


class ConfigError(FaceChannelError, ValueError):
    pass


class ShapeError(FaceChannelError, ValueError):
    pass


class InsufficientDataError(FaceChannelError, ValueError):
    pass


class InsufficientCorrespondenceError(FaceChannelError, ValueError):
    pass


class DegenerateGeometryError(FaceChannelError, ValueError):
    pass


class MissingPretrainedError(FaceChannelError):
    """A fine-tuning scheme was requested on a model without loaded weights."""


class InvalidSchemeError(FaceChannelError, ValueError):
    pass


class DivergedTrainingError(FaceChannelError, RuntimeError):
    def __init__(self, epoch: int, batch: int):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}, batch {batch}")


class NoSuccessfulTrialError(FaceChannelError, RuntimeError):
    pass
