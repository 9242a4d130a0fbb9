"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An operation received input outside its contract."""


class DegenerateInputError(InvalidInputError):
    """Input makes the computation undefined (e.g. a zero-norm vector)."""


class InvalidStateError(RuntimeError):
    """Internal state cannot support the requested operation."""


class UsageError(RuntimeError):
    """An API was called out of order (e.g. backward before forward)."""


class ConfigurationError(ValueError):
    """Configuration is inconsistent or unusable."""


class PretrainAccuracyError(ConfigurationError):
    """Source pre-training missed the minimum accuracy gate."""

    def __init__(self, accuracy: float, gate: float):
        self.accuracy = accuracy
        self.gate = gate
        super().__init__(
            f"source model reached {accuracy:.4f} holdout accuracy, below the {gate:.2f} gate"
        )


class TrainingDivergedError(RuntimeError):
    """A training loop produced non-finite losses, gradients, or parameters."""


class DatasetParseError(ValueError):
    """A dataset file is malformed; the message carries the offending line number."""

    def __init__(self, path, line_no: int, msg: str):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {msg}")
