"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
1 for bad input, 2 for integrity violations (leakage, broken invariants),
3 when a remote endpoint is exhausted.
"""


class SupplycastError(Exception):
    exit_code = 1


class InputError(SupplycastError):
    exit_code = 1


class IntegrityError(SupplycastError):
    exit_code = 2


# index_core
class MissingMonth(InputError):
    pass


class InsufficientHistory(InputError):
    pass


class DegenerateThreshold(InputError):
    pass


# dataset
class EmptyDataset(InputError):
    pass


class LeakageDetected(IntegrityError):
    def __init__(self, message, offending_ids=()):
        super().__init__(message)
        self.offending_ids = list(offending_ids)


class LookAheadViolation(IntegrityError):
    def __init__(self, message, article_id=None, question_id=None):
        super().__init__(message)
        self.article_id = article_id
        self.question_id = question_id


class LabelIntegrityError(IntegrityError):
    pass


# promptkit
class AnswerParseError(InputError):
    pass


class NoAnswerTag(AnswerParseError):
    pass


class MalformedNumber(AnswerParseError):
    pass


class OutOfRange(AnswerParseError):
    pass


# forecasters
class EndpointUnavailable(SupplycastError):
    exit_code = 3


class AnswerUnparseable(InputError):
    def __init__(self, message, raw_output=""):
        super().__init__(message)
        self.raw_output = raw_output


# training
class GroupTooSmall(InputError):
    pass


class Diverged(IntegrityError):
    pass


class MissingRollouts(InputError):
    pass


# metrics
class EmptyEvaluation(InputError):
    pass


# judge
class EmptyTrace(InputError):
    pass


class JudgeParseError(InputError):
    pass


class MissingKeys(JudgeParseError):
    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = sorted(missing)


class NonBinaryValue(JudgeParseError):
    pass


class JudgeConfigError(InputError):
    pass


# synth
class InfeasibleConfig(InputError):
    pass
