"""Exception hierarchy.

Errors split into two families so that callers (and the CLI exit codes) can
tell bad input apart from a failed estimation: :class:`ValidationError` for
data that violates the partially nested design, :class:`EstimationError` for
model fitting, positivity and inference failures.
"""


class PartNestError(Exception):
    """Base class for every error raised by the package."""


class ValidationError(PartNestError):
    """Input data does not satisfy the ingestion contract."""


class EstimationError(PartNestError):
    """A model fit, estimator or variance computation failed."""

    #: name of the nuisance model that failed, set by ``fit_nuisances``
    nuisance = None


# -- data ---------------------------------------------------------------------

class MissingColumn(ValidationError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"required column {column!r} not found in header")


class NonNumericCovariate(ValidationError):
    def __init__(self, row, column, value):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(
            f"row {row}: covariate {column!r} has non-numeric value {value!r}"
        )


class InvariantViolation(ValidationError):
    """A row breaks one of the observation rules.

    ``rule`` is one of the short identifiers in :data:`partnest.data.RULES`.
    """

    def __init__(self, row, rule, detail=""):
        self.row = row
        self.rule = rule
        where = "observation" if row is None else f"row {row}"
        msg = f"{where}: violates {rule!r} rule"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class EmptySubset(ValidationError):
    pass


# -- model fitting -------------------------------------------------------------

class SeparationDetected(EstimationError):
    pass


class SingularInformation(EstimationError):
    pass


class OneClassResponse(EstimationError):
    def __init__(self, msg, level=None):
        self.level = level
        super().__init__(msg)


class RankDeficient(EstimationError):
    pass


class DimensionMismatch(EstimationError):
    pass


# -- estimators ----------------------------------------------------------------

class NoTargetRows(EstimationError):
    pass


class NoTrialRows(EstimationError):
    pass


class PositivityViolation(EstimationError):
    pass


class OnePartOnly(EstimationError):
    pass


# -- inference -----------------------------------------------------------------

class StackInconsistent(EstimationError):
    pass


class SingularBread(EstimationError):
    pass


class TooManyFailedReplicates(EstimationError):
    def __init__(self, failed, total):
        self.failed = failed
        self.total = total
        super().__init__(
            f"{failed} of {total} bootstrap replicates failed (limit is 5%)"
        )


class TooManyFailedRuns(EstimationError):
    def __init__(self, failed, total):
        self.failed = failed
        self.total = total
        super().__init__(
            f"{failed} of {total} simulation runs failed (limit is 2%)"
        )
