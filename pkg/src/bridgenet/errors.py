"""Exception hierarchy. Every error raised by the package derives from BridgeError."""


class BridgeError(Exception):
    pass


class DimensionError(BridgeError, ValueError):
    """Tensor shapes are incompatible with the operation."""


class ContractError(BridgeError, ValueError):
    """A precondition on arguments was violated."""


class ParameterError(BridgeError, ValueError):
    """A scalar hyperparameter is outside its admissible range."""


class GraphError(BridgeError, RuntimeError):
    """A tensor is not part of the computation tape being replayed."""


class DegenerateBatchError(BridgeError, ValueError):
    """Batch statistics are undefined for a single element per channel."""


class NoNegativesError(BridgeError, ValueError):
    """No valid mismatched pair exists in the dataset."""


class NumericalError(BridgeError, ArithmeticError):
    pass


class DivergenceError(BridgeError, ArithmeticError):
    def __init__(self, message, batch_index=None, epoch=None):
        super().__init__(message)
        self.batch_index = batch_index
        self.epoch = epoch


class FormatError(BridgeError, ValueError):
    """Malformed IDX file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointError(BridgeError, IOError):
    pass


class ModeError(BridgeError, ValueError):
    """Operation requires a model trained in a different mode."""
