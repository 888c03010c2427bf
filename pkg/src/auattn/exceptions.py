"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A caller violated an operation precondition."""


class StatisticsError(ValueError):
    """Batch statistics cannot be estimated from the given input."""


class TapeError(RuntimeError):
    """The gradient tape was misused (foreign tensor, consumed tape, ...)."""


class ConfigError(ValueError):
    """A model or training configuration is degenerate."""


class DegenerateClassError(ValueError):
    """An action unit has no positive examples, so its class weight is undefined."""

    def __init__(self, au_index, au_name=None):
        self.au_index = au_index
        self.au_name = au_name
        label = au_name if au_name is not None else f"index {au_index}"
        super().__init__(f"action unit {label} has no positive samples; class weight undefined")


class EmptyLossError(ValueError):
    """Every label entry in the batch is invalid, so the loss has no terms."""


class AnnotationParseError(ValueError):
    """An annotation file does not follow the expected format."""

    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class DatasetError(RuntimeError):
    """A dataset is empty or otherwise unusable."""


class CorruptCheckpointError(ValueError):
    """A checkpoint file has a bad header, wrong version, or is truncated."""


class TrainingDivergedError(RuntimeError):
    """The loss became NaN or infinite during training."""

    def __init__(self, epoch, batch, lr):
        self.epoch = epoch
        self.batch = batch
        self.lr = lr
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch} (lr={lr})")
