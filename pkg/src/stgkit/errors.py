"""Exception hierarchy shared by every module."""


class StgError(Exception):
    """Base class for all errors raised by stgkit."""


class DimensionError(StgError, ValueError):
    pass


class ContractError(StgError, ValueError):
    """A documented precondition of an operation was violated."""


class NonFiniteError(StgError, FloatingPointError):
    """An operation produced NaN or Inf."""


class DegenerateDegreeError(StgError, ValueError):
    def __init__(self, node: int):
        super().__init__(f"node {node} has zero degree; add self-loops or connect it")
        self.node = node


class EstimationError(StgError, RuntimeError):
    def __init__(self, message: str, last_estimate: float):
        super().__init__(f"{message} (last estimate {last_estimate!r})")
        self.last_estimate = last_estimate


class DataError(StgError, ValueError):
    pass


class LoadError(DataError):
    """Dataset or graph file could not be read; message names file and line."""


class ConfigError(StgError, ValueError):
    pass


class CheckpointFormatError(StgError, ValueError):
    pass


class TrainingError(StgError, RuntimeError):
    pass


class EmptyMaskError(StgError, ValueError):
    pass
