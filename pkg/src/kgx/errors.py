"""Exception hierarchy shared by every kgx module."""


class KgxError(Exception):
    """Base class for all library errors."""


class ValidationError(KgxError):
    """Bad input detected before any work was done (CLI exit code 1)."""


# imaging-core
class InvalidChannelCount(ValidationError):
    pass


class InvalidChannelIndex(ValidationError):
    pass


class InvalidParameter(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class NoBrightRegion(KgxError):
    pass


# extraction plans
class PlanError(ValidationError):
    """Plan document problem; ``step`` is the offending step index or None."""

    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)


class UnknownOp(PlanError):
    pass


class ArityMismatch(PlanError):
    pass


class UnboundSlot(PlanError):
    pass


class TypeChainBroken(PlanError):
    pass


class MalformedDocument(PlanError):
    pass


class PlanExecutionError(KgxError):
    def __init__(self, step, cause):
        self.step = step
        self.cause = cause
        super().__init__(f"step {step}: {type(cause).__name__}: {cause}")


# rule base / retrieval
class RuleBaseError(ValidationError):
    pass


class EmptyCorpus(ValidationError):
    pass


class SchemaMismatch(ValidationError):
    pass


# llm bridge
class RetriesExhausted(KgxError):
    def __init__(self, attempts, last_error):
        self.attempts = attempts
        self.last_error = last_error
        super().__init__(f"gave up after {attempts} attempt(s); last error: {last_error}")


class WrongRuleTarget(ValidationError):
    pass


# verification / tuning / classifiers / fusion
class MissingGroundTruth(ValidationError):
    pass


class StratificationImpossible(ValidationError):
    pass


class DegenerateLabels(ValidationError):
    pass


class UndefinedMetric(ValidationError):
    pass


class ReportedMissingIds(ValidationError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"image ids without a partner record: {', '.join(self.missing[:10])}"
                         + (" ..." if len(self.missing) > 10 else ""))


class SceneOverconstrained(KgxError):
    pass
