"""Exception types shared across the package."""


class PromptDTError(Exception):
    """Base class for all package errors."""


class ShapeError(PromptDTError):
    """Operands have incompatible shapes for an operation."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)


class ContractError(PromptDTError):
    """A caller violated a documented precondition."""


class NumericsError(PromptDTError):
    """A forward op produced NaN/Inf from finite inputs (debug mode only)."""


class DataError(PromptDTError):
    """A dataset does not contain what an operation needs."""


class ParseError(PromptDTError):
    """A persisted file is malformed."""

    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = str(path)
        self.line_no = line_no


class EpisodeDone(PromptDTError):
    """Raised when stepping an environment past its horizon."""


class DegenerateBaselineError(PromptDTError):
    """Expert and random baselines coincide; normalization undefined."""
