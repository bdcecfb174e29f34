"""Exception hierarchy for the toolkit.

Every error carries a machine-readable ``name`` (the class name without the
``Error`` suffix) and an ``exit_code`` used by the CLI:

    2  configuration problem (bad spec, bad params, malformed config)
    3  data problem (file corruption, invariant violations, empty inputs)
    4  numerical failure (diverged optimization, singular systems)
"""


class TomoHeightError(Exception):
    exit_code = 1

    @property
    def name(self) -> str:
        n = type(self).__name__
        return n[:-5] if n.endswith("Error") else n


class ConfigError(TomoHeightError):
    exit_code = 2


class DataError(TomoHeightError):
    exit_code = 3


class NumericalError(TomoHeightError):
    exit_code = 4


# -- configuration ----------------------------------------------------------

class BadSpecError(ConfigError):
    pass


class BadParamsError(ConfigError):
    pass


class TooSmallError(ConfigError):
    pass


class OutOfSpaceError(ConfigError):
    pass


class BadConfigError(ConfigError):
    """Malformed or schema-violating experiment configuration document."""


# -- data -------------------------------------------------------------------

class BadMagicError(DataError):
    pass


class HeaderParseError(DataError):
    pass


class TruncatedPayloadError(DataError):
    pass


class InvariantViolationError(DataError):
    """A domain-type invariant failed; ``violation`` names the first one."""

    def __init__(self, violation: str, detail: str = ""):
        self.violation = violation
        super().__init__(f"{violation}: {detail}" if detail else violation)


class DimensionMismatchError(DataError):
    pass


class IncompatibleSpacingError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class LengthMismatchError(DataError):
    pass


class ZeroVarianceError(DataError):
    pass


class ConstantChannelError(DataError):
    pass


class NotFittedError(DataError):
    pass


class EmptySelectionError(DataError):
    pass


class EmptyVegetationWindowError(DataError):
    pass


class DegenerateSplitError(DataError):
    pass


class TooFewRowsError(DataError):
    pass


class SchemaMismatchError(DataError):
    pass


class ShapeMismatchError(DataError):
    pass


class NoPatchesError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class NonFiniteError(DataError):
    pass


# -- numerics ---------------------------------------------------------------

class SingularSystemError(NumericalError):
    pass


class DivergedLossError(NumericalError):
    pass


class AllTrialsFailedError(NumericalError):
    pass
