"""
Utility functions for stepscore
Segment type, interval arithmetic and atomic file output
"""

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

from src.errors import InvalidSegmentError

Interval = Tuple[float, float]

NON_SPEECH = "non-speech"
SPEECH = "speech"


@dataclass(frozen=True)
class LabeledSegment:
    """A [start, end) span in seconds with a speech/non-speech or speaker label"""

    start: float
    end: float
    label: str = SPEECH
    score: Optional[float] = None

    def __post_init__(self):
        if not (0.0 <= self.start < self.end):
            raise InvalidSegmentError(
                f"segment needs 0 <= start < end, got [{self.start}, {self.end})"
            )

    @property
    def duration(self) -> float:
        return self.end - self.start

    @property
    def is_speech(self) -> bool:
        return self.label != NON_SPEECH


# ---- interval arithmetic ----

def normalize_intervals(intervals: Iterable[Interval]) -> List[Interval]:
    """
    Sort intervals and merge the ones that overlap or touch

    Args:
        intervals: (start, end) pairs, any order

    Returns:
        Disjoint, sorted (start, end) pairs with positive length
    """
    ordered = sorted((float(s), float(e)) for s, e in intervals if e > s)
    merged: List[Interval] = []
    for start, end in ordered:
        if merged and start <= merged[-1][1]:
            if end > merged[-1][1]:
                merged[-1] = (merged[-1][0], end)
        else:
            merged.append((start, end))
    return merged


def total_duration(intervals: Iterable[Interval]) -> float:
    return float(sum(e - s for s, e in intervals))


def intersect_intervals(a: Sequence[Interval], b: Sequence[Interval]) -> List[Interval]:
    """Intersection of two normalized interval lists"""
    out: List[Interval] = []
    i = j = 0
    while i < len(a) and j < len(b):
        start = max(a[i][0], b[j][0])
        end = min(a[i][1], b[j][1])
        if end > start:
            out.append((start, end))
        if a[i][1] < b[j][1]:
            i += 1
        else:
            j += 1
    return out


def subtract_intervals(a: Sequence[Interval], b: Sequence[Interval]) -> List[Interval]:
    """Set difference a minus b for normalized interval lists"""
    out: List[Interval] = []
    j = 0
    for start, end in a:
        cursor = start
        while j < len(b) and b[j][1] <= cursor:
            j += 1
        k = j
        while k < len(b) and b[k][0] < end:
            if b[k][0] > cursor:
                out.append((cursor, b[k][0]))
            cursor = max(cursor, b[k][1])
            if cursor >= end:
                break
            k += 1
        if cursor < end:
            out.append((cursor, end))
    return out


def speech_intervals(segments: Iterable[LabeledSegment]) -> List[Interval]:
    """Normalized union of every segment not labeled non-speech"""
    return normalize_intervals((seg.start, seg.end) for seg in segments if seg.is_speech)


# ---- formatting ----

def format_time(seconds: float) -> str:
    """Fixed-point, 2 decimals (label files and RTTM)"""
    return f"{seconds:.2f}"


# ---- atomic output ----

def atomic_write_bytes(path: Union[str, Path], data: bytes) -> Path:
    """
    Write bytes to path through a temp file in the same directory and a rename

    Args:
        path: Destination file
        data: Payload

    Returns:
        The destination path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))
