class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class UsageError(ValueError):
    """An API was called with arguments outside its contract."""


class ConfigError(ValueError):
    """A network spec or run config is inconsistent."""


class FormatError(ValueError):
    """A binary file does not follow its documented layout."""


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
