"""Exception hierarchy shared across the package."""


class MPTError(Exception):
    """Base class for all package errors."""


class ShapeError(MPTError, ValueError):
    """Operand shapes do not compose."""


class ConfigError(MPTError, ValueError):
    """Invalid hyperparameter or configuration value."""


class FullyPrunedError(MPTError):
    """A prunable layer has no surviving weights."""

    def __init__(self, layer_id, message="layer fully pruned"):
        self.layer_id = layer_id
        super().__init__(f"{message} (layer {layer_id})")


class TrainingAborted(MPTError):
    """Training stopped because of a non-finite loss or a degenerate mask."""


class FormatError(MPTError, ValueError):
    """A data or checkpoint file does not follow its binary layout."""
