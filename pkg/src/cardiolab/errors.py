"""Exception hierarchy. Every failure raised by the package derives from CardioLabError."""


class CardioLabError(Exception):
    """Base class; ``code`` is the machine-parseable name used by the CLI."""

    @property
    def code(self) -> str:
        return type(self).__name__


# ingestion
class MalformedHeader(CardioLabError):
    pass


class LengthMismatch(CardioLabError):
    pass


class NonFiniteSample(CardioLabError):
    pass


class NonIntegerFactor(CardioLabError):
    pass


class RowError(CardioLabError):
    """A CSV row failed validation; ``row`` is the 1-based data row number (header excluded)."""

    def __init__(self, message: str, row: int):
        super().__init__(f"row {row}: {message}")
        self.row = row


class UnknownChannel(RowError):
    pass


class UnparseableTime(RowError):
    pass


class NonFiniteValue(RowError):
    pass


class MalformedRow(RowError):
    pass


# cohort
class DuplicateLabel(CardioLabError):
    pass


class AllMissingInTrain(CardioLabError):
    def __init__(self, field: str):
        super().__init__(f"no observed value for {field!r} in the train fold")
        self.field = field


class TooFewPatients(CardioLabError):
    pass


# model
class ShapeMismatch(CardioLabError):
    pass


class NonFiniteActivation(CardioLabError):
    pass


# trainer
class NonFiniteGradient(CardioLabError):
    pass


class NonFiniteLoss(CardioLabError):
    pass


class EmptyFold(CardioLabError):
    pass


class RecordTooShort(CardioLabError):
    pass


class ManifestMismatch(CardioLabError):
    pass


# evaluator
class DegenerateClasses(CardioLabError):
    def __init__(self, message: str, label: str | None = None):
        super().__init__(message)
        self.label = label


class TooFewValidReplicates(CardioLabError):
    def __init__(self, label: str, n_valid: int):
        super().__init__(f"label {label!r}: only {n_valid} valid bootstrap replicates")
        self.label = label
        self.n_valid = n_valid


# cli
class ConfigError(CardioLabError):
    pass
