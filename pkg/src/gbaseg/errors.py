"""Exception types shared across the package.

Each class carries the CLI exit code it maps to, so the command line layer
can translate failures without a lookup table.
"""


class GBASegError(Exception):
    exit_code = 1


class InvalidArgumentError(GBASegError, ValueError):
    exit_code = 2


class DegenerateInputError(GBASegError, ValueError):
    exit_code = 2


class ConfigError(GBASegError):
    exit_code = 2


class UndefinedScoreError(GBASegError, ValueError):
    """Raised when a score has no defined value (e.g. ASSD of an empty mask)."""

    exit_code = 3


class NumericalDivergenceError(GBASegError, ArithmeticError):
    """Non-finite values or runaway growth during an iterative computation.

    ``history`` holds whatever loss log was accumulated before the abort.
    """

    exit_code = 3

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history if history is not None else []


class SelfTrainFailure(GBASegError):
    """Teacher model fell below the failure gate; carries the partial state."""

    exit_code = 4

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class StageError(GBASegError):
    """A pipeline stage failed. Wraps the original error with stage/case names."""

    def __init__(self, stage, case, cause):
        self.stage = stage
        self.case = case
        self.cause = cause
        where = f"stage '{stage}'" + (f", case '{case}'" if case else "")
        super().__init__(f"{where}: {cause}")
        self.exit_code = getattr(cause, "exit_code", 1)


class EmptyMaskWarning(UserWarning):
    pass
