class KnobError(Exception):
    """Base class for every error the CLI turns into an exit code."""

    exit_code = 1


class ConfigError(KnobError):
    exit_code = 2


class ShapeError(ConfigError, ValueError):
    pass


class OperatingPointError(ConfigError):
    def __init__(self, target, minimum):
        self.target = target
        self.minimum = minimum
        super().__init__(
            f"FLOPs target {target:.3f} is unreachable; "
            f"the minimum achievable fraction is {minimum:.4f}"
        )


class MissingPrerequisiteError(ConfigError):
    def __init__(self, what, command):
        self.what = what
        self.command = command
        super().__init__(f"Missing {what}. Run `{command}` first.")


class DataError(KnobError):
    exit_code = 3


class DivergenceError(KnobError):
    exit_code = 4

    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"Training diverged at step {step} (loss={loss})")


class CheckpointError(KnobError):
    exit_code = 5


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class MaskMismatchError(CheckpointError):
    def __init__(self, expected, actual, tag=None):
        self.expected = expected
        self.actual = actual
        self.tag = tag
        name = "Update" if tag is None else f"Update {tag!r}"
        super().__init__(
            f"{name} was trained for mask {expected} but the model carries mask {actual}"
        )


class OutputError(KnobError):
    """A result file (table, stamp, corpus) could not be written."""

    exit_code = 5
