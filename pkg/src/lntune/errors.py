"""Exception types shared across the package."""


class LnTuneError(Exception):
    pass


class DimensionError(LnTuneError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(LnTuneError, ValueError):
    """A precondition of an operation was violated."""


class LengthError(LnTuneError, ValueError):
    pass


class ConfigError(LnTuneError, ValueError):
    """Invalid method, model or experiment configuration.

    ``path`` names the offending config field when known (e.g. ``method.prefix_len``).
    """

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class NumericError(LnTuneError, ArithmeticError):
    pass


class SolverError(LnTuneError, ValueError):
    pass


class SearchError(LnTuneError, RuntimeError):
    pass


class ComparabilityError(LnTuneError, ValueError):
    pass


class MissingDataError(LnTuneError, LookupError):
    pass
