"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class ParameterError(ValueError):
    """A scalar argument is outside its valid range."""


class ConfigError(ValueError):
    """An experiment or CLI configuration is inconsistent."""


class ContractError(RuntimeError):
    """A caller broke a usage contract (stale cache, non-binary mask, ...)."""


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss.

    ``layer`` names the first layer whose output went non-finite, or
    ``"loss"`` when every layer output was finite.
    """

    def __init__(self, message, layer=None, epoch=None):
        super().__init__(message)
        self.layer = layer
        self.epoch = epoch
