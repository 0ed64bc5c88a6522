"""Exception hierarchy. Each class carries a short ``category`` the CLI reports."""


class DiffAttnError(Exception):
    category = "error"


class ConfigError(DiffAttnError, ValueError):
    category = "config"


class StepIndexError(DiffAttnError, IndexError):
    category = "step-index"


class ShapeError(DiffAttnError, ValueError):
    category = "shape"


class ContractViolation(ShapeError):
    category = "contract"


class DependencyError(DiffAttnError, ValueError):
    category = "dependency"


class NumericFailure(DiffAttnError, FloatingPointError):
    category = "numeric"


class DatasetError(DiffAttnError):
    category = "dataset"


class CheckpointVersionError(DiffAttnError):
    category = "checkpoint-version"


class DegenerateTargetError(DiffAttnError, ValueError):
    category = "degenerate-target"


class UndefinedMetricError(DiffAttnError, ValueError):
    category = "undefined-metric"


class EmptyGroundTruthWarning(UserWarning):
    pass


class DegenerateMapWarning(UserWarning):
    pass


class EmptySplitWarning(UserWarning):
    pass
