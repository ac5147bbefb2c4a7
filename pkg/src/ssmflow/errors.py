"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes or lengths that do not fit together."""


class ConfigError(ValueError):
    """Invalid, unknown, or inconsistent configuration."""


class DomainError(ValueError):
    """A scalar argument outside its valid range."""


class ContractError(ValueError):
    """An operation was called outside its stated contract."""


class NumericError(ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step, scene_id, value):
        self.step = step
        self.scene_id = scene_id
        self.value = value
        super().__init__(
            f"non-finite loss {value!r} at step {step} on scene {scene_id!r}"
        )


class CheckpointMismatchError(ValueError):
    """A checkpoint does not match the model it is being loaded into."""

    def __init__(self, param_name, detail):
        self.param_name = param_name
        super().__init__(f"checkpoint mismatch at parameter {param_name!r}: {detail}")


class SceneFormatError(ValueError):
    """A scene file does not follow the six-column text format."""
