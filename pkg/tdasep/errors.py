"""
Exception hierarchy shared by every module.
"""

from typing import Optional, Sequence


class TDANetError(Exception):
    """Base class for all package errors"""


class ConfigError(TDANetError, ValueError):
    """Invalid configuration value, unknown key or inconsistent flags"""


class DimensionError(TDANetError, ValueError):
    """A shape contract was violated"""

    def __init__(self, message: str, *shapes: Sequence[int]):
        if shapes:
            rendered = ", ".join(str(tuple(s)) for s in shapes)
            message = f"{message} (shapes: {rendered})"
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class TapeStateError(TDANetError, RuntimeError):
    """Backward was requested through a released or detached tape"""


class NonFiniteError(TDANetError, FloatingPointError):
    """NaN or Inf appeared in a value or gradient"""

    def __init__(self, message: str, op: Optional[str] = None):
        if op:
            message = f"{op}: {message}"
        super().__init__(message)
        self.op = op


class InputError(TDANetError, ValueError):
    """Signal or audio input does not satisfy an operation's precondition"""


class WavFormatError(TDANetError, ValueError):
    """Unsupported or malformed RIFF/WAVE file"""

    def __init__(self, path: str, chunk: str, detail: str):
        super().__init__(f"{path}: bad '{chunk}' chunk: {detail}")
        self.path = path
        self.chunk = chunk


class CheckpointError(TDANetError):
    """Checkpoint manifest and binary payload disagree or are unreadable"""
