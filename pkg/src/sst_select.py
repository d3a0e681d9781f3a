"""
Semi-supervised training data selection
Duration / confidence filters over automatically transcribed segments, hour accounting
and the weighted training manifest
"""

from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd
import structlog

import config
from src.errors import InvalidSegmentError, UsageError

logger = structlog.get_logger(__name__)

SECONDS_PER_HOUR = 3600.0
KINDS = ("speech", "non-speech")

TOO_SHORT = "too-short"
TOO_LONG = "too-long"
LOW_CONFIDENCE = "low-confidence"
OVER_BUDGET = "over-budget"
REJECT_REASONS = (TOO_SHORT, TOO_LONG, LOW_CONFIDENCE, OVER_BUDGET)

# Duration bounds are inclusive; this absorbs float noise in end - start
_EPS = 1e-9


@dataclass(frozen=True)
class HypSegment:
    recording_id: str
    start: float
    end: float
    kind: str = "speech"
    confidence: float = 1.0
    transcript: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        if not self.end > self.start:
            raise InvalidSegmentError(f"{self.recording_id}: end {self.end} <= start {self.start}")
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidSegmentError(f"{self.recording_id}: confidence {self.confidence} outside [0, 1]")
        if self.kind not in KINDS:
            raise InvalidSegmentError(f"{self.recording_id}: unknown kind {self.kind!r}")

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class SelectionReport:
    selected_speech_hours: float = 0.0
    selected_nonspeech_hours: float = 0.0
    counts: Dict[str, int] = field(default_factory=lambda: {kind: 0 for kind in KINDS})
    rejections: Dict[str, int] = field(default_factory=lambda: {r: 0 for r in REJECT_REASONS})
    rejected_hours: Dict[str, float] = field(default_factory=lambda: {r: 0.0 for r in REJECT_REASONS})

    @property
    def total_hours(self) -> float:
        return self.selected_speech_hours + self.selected_nonspeech_hours + sum(self.rejected_hours.values())

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {'bucket': 'selected', 'kind': 'speech', 'count': self.counts['speech'],
             'hours': self.selected_speech_hours},
            {'bucket': 'selected', 'kind': 'non-speech', 'count': self.counts['non-speech'],
             'hours': self.selected_nonspeech_hours},
        ]
        for reason in REJECT_REASONS:
            rows.append({'bucket': 'rejected', 'kind': reason, 'count': self.rejections[reason],
                         'hours': self.rejected_hours[reason]})
        return pd.DataFrame(rows, columns=['bucket', 'kind', 'count', 'hours'])


def duration_report(segments: Sequence[HypSegment]) -> SelectionReport:
    """
    Sum durations by kind and convert to hours

    Args:
        segments: Any segments; all are counted as selected

    Returns:
        SelectionReport with no rejections
    """
    report = SelectionReport()
    seconds = {kind: 0.0 for kind in KINDS}
    for seg in segments:
        seconds[seg.kind] += seg.duration
        report.counts[seg.kind] += 1
    report.selected_speech_hours = seconds['speech'] / SECONDS_PER_HOUR
    report.selected_nonspeech_hours = seconds['non-speech'] / SECONDS_PER_HOUR
    return report


def rejection_reason(seg: HypSegment, min_dur: float, max_dur: float, min_conf: float) -> Optional[str]:
    """First matching reason in precedence order, None when the segment is kept"""
    if seg.duration < min_dur - _EPS:
        return TOO_SHORT
    if seg.duration > max_dur + _EPS:
        return TOO_LONG
    if seg.confidence < min_conf:
        return LOW_CONFIDENCE
    return None


def select_segments(
    hyps: Sequence[HypSegment],
    min_dur: float = config.SST_DEFAULTS['min_dur'],
    max_dur: float = config.SST_DEFAULTS['max_dur'],
    min_conf: float = config.SST_DEFAULTS['min_conf'],
    target_hours: Optional[Dict[str, float]] = None,
) -> Tuple[List[HypSegment], SelectionReport]:
    """
    Keep segments with min_dur <= duration <= max_dur and confidence >= min_conf

    Args:
        hyps: Candidate segments
        min_dur, max_dur: Inclusive duration bounds in seconds
        min_conf: Minimum confidence
        target_hours: Optional per-kind budget; kept segments are ranked by confidence
            and truncated once the budget would be exceeded

    Returns:
        (selected segments in input order, report)
    """
    if not min_dur < max_dur:
        raise UsageError(f"min_dur ({min_dur}) must be below max_dur ({max_dur})")

    reasons: List[Optional[str]] = [rejection_reason(seg, min_dur, max_dur, min_conf) for seg in hyps]

    if target_hours:
        for kind, budget in target_hours.items():
            if budget < 0:
                raise UsageError(f"negative hour budget for {kind}")
            ranked = sorted(
                (i for i, seg in enumerate(hyps) if reasons[i] is None and seg.kind == kind),
                key=lambda i: (-hyps[i].confidence, hyps[i].recording_id, hyps[i].start, hyps[i].end),
            )
            used = 0.0
            exhausted = False
            for i in ranked:
                hours = hyps[i].duration / SECONDS_PER_HOUR
                if exhausted or used + hours > budget + _EPS:
                    exhausted = True
                    reasons[i] = OVER_BUDGET
                else:
                    used += hours

    selected = [seg for seg, reason in zip(hyps, reasons) if reason is None]
    report = duration_report(selected)
    for seg, reason in zip(hyps, reasons):
        if reason is not None:
            report.rejections[reason] += 1
            report.rejected_hours[reason] += seg.duration / SECONDS_PER_HOUR

    logger.info("sst_selected", kept=len(selected), total=len(hyps),
                rejections=dict(Counter(r for r in reasons if r is not None)))
    return selected, report


def weighting_manifest(
    supervised: Sequence[HypSegment],
    selected: Sequence[HypSegment],
    weight_sup: float = config.SST_DEFAULTS['weight_sup'],
    weight_unsup: float = config.SST_DEFAULTS['weight_unsup'],
) -> List[str]:
    """
    Training manifest lines `rec start end weight source_tag`

    Weights are written as configured, in shortest %g form so they read back unchanged.
    """
    if weight_sup <= 0 or weight_unsup <= 0:
        raise UsageError("manifest weights must be positive")
    lines = []
    for segments, weight, tag in ((supervised, weight_sup, "sup"), (selected, weight_unsup, "sst")):
        for seg in segments:
            lines.append(f"{seg.recording_id}\t{seg.start:.2f}\t{seg.end:.2f}\t{weight:g}\t{tag}")
    return lines
