"""
Exception hierarchy
Every library error derives from StepscoreError; the CLI maps the family to an exit code
"""

from pathlib import Path
from typing import Optional, Union

import config


class StepscoreError(Exception):
    """Base class for all toolkit errors"""

    exit_code = config.EXIT_CODES['data']


# ---- usage (exit 2) ----

class UsageError(StepscoreError):
    """Bad flags, missing inputs for a command, invalid parameter values"""

    exit_code = config.EXIT_CODES['usage']


# ---- data / format (exit 3) ----

class DataFormatError(StepscoreError):
    exit_code = config.EXIT_CODES['data']


class FormatError(DataFormatError):
    """Malformed file; carries the path and 1-based line number when known"""

    def __init__(self, message: str, path: Optional[Union[str, Path]] = None, line: Optional[int] = None):
        self.path = str(path) if path is not None else None
        self.line = line
        where = ""
        if self.path is not None:
            where = f"{self.path}:{line}: " if line is not None else f"{self.path}: "
        super().__init__(f"{where}{message}")


class UnsupportedFormatError(DataFormatError):
    pass


class EmptyFeatureError(DataFormatError):
    pass


class EmptyChunkError(DataFormatError):
    pass


class AlignmentError(DataFormatError):
    pass


class CoverageError(DataFormatError):
    pass


class SampleRateMismatchError(DataFormatError):
    pass


class DegenerateDataError(DataFormatError):
    pass


class InvalidInitError(DataFormatError):
    pass


class InvalidSegmentError(DataFormatError):
    pass


class ShapeError(DataFormatError):
    pass


# ---- numerical (exit 4) ----

class NumericalError(StepscoreError):
    """Singular or otherwise unusable numerical state"""

    exit_code = config.EXIT_CODES['numerical']


class RankError(NumericalError):
    pass


class UndefinedRateError(NumericalError):
    """A rate whose denominator (reference speech, non-speech or words) is zero"""
