"""Exception and warning classes raised across the package."""


class MVTPError(Exception):
    """Base class for all package errors."""


class ConfigError(MVTPError, ValueError):
    """Invalid run or benchmark configuration."""


class SchemaMismatch(MVTPError, ValueError):
    pass


class ParseError(MVTPError, ValueError):
    def __init__(self, row, col, value=None):
        self.row = row
        self.col = col
        self.value = value
        super().__init__(f"cannot parse value {value!r} at row {row}, column {col!r}")


class EmptyDataset(MVTPError, ValueError):
    pass


class DimensionMismatch(MVTPError, ValueError):
    pass


class InvalidWeights(MVTPError, ValueError):
    pass


class NoBlockMatches(MVTPError, ValueError):
    def __init__(self, row=None):
        self.row = row
        where = "" if row is None else f" (row {row})"
        super().__init__(f"no policy block matches the input{where}")


class MultipleBlocksMatch(MVTPError, ValueError):
    def __init__(self, row=None):
        self.row = row
        where = "" if row is None else f" (row {row})"
        super().__init__(f"more than one policy block matches the input{where}")


class UnknownPolicyName(MVTPError, ValueError):
    pass


class LayoutMismatch(MVTPError, ValueError):
    pass


class TooFewRows(MVTPError, ValueError):
    pass


class SingularDesign(MVTPError, ValueError):
    pass


class BootstrapUnstable(MVTPError, RuntimeError):
    pass


class TruthUnavailable(MVTPError, ValueError):
    pass


class SourceTooNarrow(MVTPError, ValueError):
    pass


class NumericalFailure(MVTPError, RuntimeError):
    pass


class NotConvergedWarning(RuntimeWarning):
    """The weight solver hit its iteration budget; the best iterate is returned."""


class NonConvexObjectiveWarning(RuntimeWarning):
    """The projected Hessian of the balancing objective has a negative eigenvalue."""


class SeparationWarning(RuntimeWarning):
    """Observed and shifted rows are (nearly) perfectly separable; odds were clipped."""
