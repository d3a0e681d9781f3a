"""
Scoring
SAD miss / false-alarm rates with DCF and DCF_INV, frame-quantized DER with optimal
speaker mapping, WER by minimal-edit alignment, speaker-count error analysis
"""

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog
from scipy.optimize import linear_sum_assignment

import config
from src.data_loader import parse_utt_id
from src.errors import CoverageError, FormatError, InvalidSegmentError, UndefinedRateError, UsageError
from src.utils import (
    LabeledSegment,
    normalize_intervals,
    speech_intervals,
    subtract_intervals,
    total_duration,
)

logger = structlog.get_logger(__name__)

# Tolerance for segment bounds against the file duration
_BOUND_EPS = 1e-6

UNK = "<unk>"


# ==================== SAD ====================

@dataclass(frozen=True)
class SadErrorStats:
    p_fn: float
    p_fp: float
    ref_speech_dur: float = 0.0
    ref_nonspeech_dur: float = 0.0


@dataclass(frozen=True)
class SadErrorDurations:
    """Raw seconds behind a SadErrorStats; rates may be undefined for a single file"""

    missed: float
    false_alarm: float
    ref_speech: float
    ref_nonspeech: float

    def stats(self) -> SadErrorStats:
        if self.ref_speech <= 0.0:
            raise UndefinedRateError("reference holds no speech; miss rate undefined")
        if self.ref_nonspeech <= 0.0:
            raise UndefinedRateError("reference holds no non-speech; false-alarm rate undefined")
        return SadErrorStats(
            p_fn=min(1.0, self.missed / self.ref_speech),
            p_fp=min(1.0, self.false_alarm / self.ref_nonspeech),
            ref_speech_dur=self.ref_speech,
            ref_nonspeech_dur=self.ref_nonspeech,
        )


def _check_bounds(segments: Sequence[LabeledSegment], file_dur: float, what: str) -> None:
    for seg in segments:
        if seg.end > file_dur + _BOUND_EPS:
            raise InvalidSegmentError(f"{what} segment [{seg.start}, {seg.end}) exceeds file duration {file_dur}")


def sad_error_durations(ref: Sequence[LabeledSegment], hyp: Sequence[LabeledSegment],
                        file_dur: float) -> SadErrorDurations:
    """Missed and false-alarm seconds by interval arithmetic"""
    _check_bounds(ref, file_dur, "reference")
    _check_bounds(hyp, file_dur, "hypothesis")
    ref_speech = speech_intervals(ref)
    hyp_speech = speech_intervals(hyp)
    speech_dur = total_duration(ref_speech)
    return SadErrorDurations(
        missed=total_duration(subtract_intervals(ref_speech, hyp_speech)),
        false_alarm=total_duration(subtract_intervals(hyp_speech, ref_speech)),
        ref_speech=speech_dur,
        ref_nonspeech=max(0.0, file_dur - speech_dur),
    )


def sad_error_stats(ref: Sequence[LabeledSegment], hyp: Sequence[LabeledSegment],
                    file_dur: float) -> SadErrorStats:
    """
    Miss rate over reference speech and false-alarm rate over reference non-speech

    Args:
        ref: Reference segments inside [0, file_dur]; non-speech labels are ignored
        hyp: Hypothesised speech segments
        file_dur: File duration in seconds

    Returns:
        SadErrorStats
    """
    return sad_error_durations(ref, hyp, file_dur).stats()


def pool_sad_stats(items: Sequence[SadErrorDurations],
                   mode: str = config.METRICS_DEFAULTS['pooling']) -> SadErrorStats:
    """
    Aggregate per-file errors

    'pooled' sums durations before dividing; 'mean' averages the per-file rates over the
    files where each rate is defined.
    """
    if mode == 'pooled':
        return SadErrorDurations(
            missed=sum(i.missed for i in items),
            false_alarm=sum(i.false_alarm for i in items),
            ref_speech=sum(i.ref_speech for i in items),
            ref_nonspeech=sum(i.ref_nonspeech for i in items),
        ).stats()
    if mode == 'mean':
        fn_rates = [i.missed / i.ref_speech for i in items if i.ref_speech > 0]
        fp_rates = [i.false_alarm / i.ref_nonspeech for i in items if i.ref_nonspeech > 0]
        if not fn_rates or not fp_rates:
            raise UndefinedRateError("no file with both reference speech and non-speech")
        return SadErrorStats(
            p_fn=float(np.mean(fn_rates)),
            p_fp=float(np.mean(fp_rates)),
            ref_speech_dur=sum(i.ref_speech for i in items),
            ref_nonspeech_dur=sum(i.ref_nonspeech for i in items),
        )
    raise UsageError(f"unknown pooling mode {mode!r}")


def dcf(stats: SadErrorStats) -> float:
    miss_weight, fa_weight = config.DCF_WEIGHTS
    return miss_weight * stats.p_fn + fa_weight * stats.p_fp


def dcf_inv(stats: SadErrorStats) -> float:
    miss_weight, fa_weight = config.DCF_INV_WEIGHTS
    return miss_weight * stats.p_fn + fa_weight * stats.p_fp


# ==================== DER ====================

@dataclass(frozen=True)
class DerBreakdown:
    missed: float
    false_alarm: float
    confusion: float
    ref_speech: float

    @property
    def der(self) -> float:
        if self.ref_speech <= 0:
            raise UndefinedRateError("reference holds no scored speech")
        return (self.missed + self.false_alarm + self.confusion) / self.ref_speech

    def __add__(self, other: "DerBreakdown") -> "DerBreakdown":
        return DerBreakdown(self.missed + other.missed, self.false_alarm + other.false_alarm,
                            self.confusion + other.confusion, self.ref_speech + other.ref_speech)


def _quantize(t: float, frame: float) -> int:
    return int(round(t / frame))


def _speaker_matrix(segments: Sequence[LabeledSegment], n_frames: int, frame: float) -> np.ndarray:
    speakers = sorted({seg.label for seg in segments})
    index = {spk: i for i, spk in enumerate(speakers)}
    active = np.zeros((n_frames, len(speakers)), dtype=bool)
    for seg in segments:
        active[_quantize(seg.start, frame):_quantize(seg.end, frame), index[seg.label]] = True
    return active


def _der_frames(ref: Sequence[LabeledSegment], hyp: Sequence[LabeledSegment],
                collar: float, frame: float) -> Tuple[int, int, int, int]:
    """(missed, false alarm, confusion, reference) frame counts on the quantized timeline"""
    if frame <= 0 or collar < 0:
        raise UsageError("frame must be positive and collar non-negative")
    ends = [seg.end for seg in list(ref) + list(hyp)]
    n_frames = max((_quantize(t, frame) for t in ends), default=0)

    ref_active = _speaker_matrix(ref, n_frames, frame)
    hyp_active = _speaker_matrix(hyp, n_frames, frame)

    scored = np.ones(n_frames, dtype=bool)
    if collar > 0:
        for seg in ref:
            for boundary in (seg.start, seg.end):
                lo = max(0, _quantize(boundary - collar, frame))
                scored[lo:_quantize(boundary + collar, frame)] = False
    ref_active = ref_active[scored]
    hyp_active = hyp_active[scored]

    n_ref = ref_active.sum(axis=1)
    n_hyp = hyp_active.sum(axis=1)
    missed = int(np.maximum(n_ref - n_hyp, 0).sum())
    false_alarm = int(np.maximum(n_hyp - n_ref, 0).sum())

    correct = 0
    if ref_active.shape[1] and hyp_active.shape[1]:
        overlap = ref_active.T.astype(np.int64) @ hyp_active.astype(np.int64)
        rows, cols = linear_sum_assignment(overlap, maximize=True)
        correct = int(overlap[rows, cols].sum())
    confusion = int(np.minimum(n_ref, n_hyp).sum()) - correct
    return missed, false_alarm, confusion, int(n_ref.sum())


def der(ref: Sequence[LabeledSegment], hyp: Sequence[LabeledSegment],
        collar: float = config.METRICS_DEFAULTS['collar'],
        frame: float = config.METRICS_DEFAULTS['frame']) -> DerBreakdown:
    """
    Diarization error on a `frame`-quantized timeline

    Reference boundaries are surrounded by an unscored collar of +-collar seconds; the
    ref/hyp speaker mapping maximizes total overlap (Hungarian assignment).

    Args:
        ref: Speaker-labeled reference segments (may overlap)
        hyp: Speaker-labeled hypothesis segments
        collar: Half-width of the no-score zone, 0 disables it
        frame: Time quantum in seconds

    Returns:
        DerBreakdown in seconds
    """
    missed, false_alarm, confusion, ref_frames = _der_frames(ref, hyp, collar, frame)
    if ref_frames == 0:
        raise UndefinedRateError("reference holds no scored speech")
    return DerBreakdown(missed * frame, false_alarm * frame, confusion * frame, ref_frames * frame)


def der_corpus(refs: Mapping[str, Sequence[LabeledSegment]],
               hyps: Mapping[str, Sequence[LabeledSegment]],
               collar: float = config.METRICS_DEFAULTS['collar'],
               frame: float = config.METRICS_DEFAULTS['frame']) -> Tuple[DerBreakdown, Dict[str, DerBreakdown]]:
    """Pooled DER over recordings plus the per-recording breakdowns"""
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise CoverageError(f"no hypothesis for {', '.join(missing)}")
    per_recording: Dict[str, DerBreakdown] = {}
    total = DerBreakdown(0.0, 0.0, 0.0, 0.0)
    for rec in sorted(refs):
        missed, false_alarm, confusion, ref_frames = _der_frames(refs[rec], hyps[rec], collar, frame)
        breakdown = DerBreakdown(missed * frame, false_alarm * frame, confusion * frame, ref_frames * frame)
        per_recording[rec] = breakdown
        total = total + breakdown
    if total.ref_speech <= 0:
        raise UndefinedRateError("reference holds no scored speech")
    return total, per_recording


# ==================== WER ====================

@dataclass(frozen=True)
class WerBreakdown:
    substitutions: int
    insertions: int
    deletions: int
    ref_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        if self.ref_words == 0:
            raise UndefinedRateError("empty reference")
        return self.errors / self.ref_words


Tokens = Union[str, Sequence[str]]


def _tokens(value: Tokens) -> List[str]:
    if isinstance(value, str):
        value = value.split()
    return [token.casefold() for token in value]


def align_counts(ref: Tokens, hyp: Tokens) -> WerBreakdown:
    """Edit counts without the empty-reference check (used for corpus sums)"""
    ref_tokens, hyp_tokens = _tokens(ref), _tokens(hyp)
    n, m = len(ref_tokens), len(hyp_tokens)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diagonal = cost[i - 1, j - 1] + (ref_tokens[i - 1] != hyp_tokens[j - 1])
            cost[i, j] = min(diagonal, cost[i - 1, j] + 1, cost[i, j - 1] + 1)

    # backtrace: match/substitution first, then insertion, then deletion
    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            mismatch = ref_tokens[i - 1] != hyp_tokens[j - 1]
            if cost[i, j] == cost[i - 1, j - 1] + mismatch:
                subs += int(mismatch)
                i, j = i - 1, j - 1
                continue
        if j > 0 and cost[i, j] == cost[i, j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return WerBreakdown(substitutions=subs, insertions=ins, deletions=dels, ref_words=n)


def wer(ref: Tokens, hyp: Tokens) -> WerBreakdown:
    """
    Minimal-edit alignment with unit costs; tokens are whitespace-split and case-folded

    Ties prefer one substitution over an insertion plus a deletion.
    """
    breakdown = align_counts(ref, hyp)
    if breakdown.ref_words == 0:
        raise UndefinedRateError("empty reference")
    return breakdown


def wer_corpus(refs: Mapping[str, Tokens], hyps: Mapping[str, Tokens]) -> WerBreakdown:
    """Summed edit counts over utterances; a missing hypothesis scores as empty"""
    subs = ins = dels = words = 0
    for utt in sorted(refs):
        counts = align_counts(refs[utt], hyps.get(utt, []))
        subs += counts.substitutions
        ins += counts.insertions
        dels += counts.deletions
        words += counts.ref_words
    if words == 0:
        raise UndefinedRateError("empty reference")
    return WerBreakdown(substitutions=subs, insertions=ins, deletions=dels, ref_words=words)


def timed_words(transcripts: Mapping[str, Sequence[str]]) -> Dict[str, List[Tuple[float, str]]]:
    """
    Place every reference word at the centre of an equal-width slot of its utterance

    Utterance ids must encode their interval (`<rec>_<start_cs>_<end_cs>`).
    """
    words: Dict[str, List[Tuple[float, str]]] = {}
    for utt, tokens in transcripts.items():
        parsed = parse_utt_id(utt)
        if parsed is None:
            raise FormatError(f"utterance id {utt!r} does not encode its interval")
        rec, start, end = parsed
        width = (end - start) / max(len(tokens), 1)
        stream = words.setdefault(rec, [])
        stream.extend((start + (k + 0.5) * width, token) for k, token in enumerate(tokens))
    return {rec: sorted(stream) for rec, stream in sorted(words.items())}


def segmentation_transcripts(
    transcripts: Mapping[str, Sequence[str]],
    hyp_segments: Mapping[str, Sequence[LabeledSegment]],
) -> Tuple[Dict[str, List[str]], Dict[str, List[str]]]:
    """
    Reference and segmentation-constrained hypothesis token streams per recording

    A reference word survives iff its time falls inside hypothesised speech; a
    hypothesised segment that contains no reference word yields one <unk> insertion.

    Returns:
        (reference streams, hypothesis streams), keyed by recording id
    """
    ref_streams: Dict[str, List[str]] = {}
    hyp_streams: Dict[str, List[str]] = {}
    for rec, stream in timed_words(transcripts).items():
        times = np.array([t for t, _ in stream])
        ref_streams[rec] = [token for _, token in stream]

        events: List[Tuple[float, str]] = []
        for start, end in normalize_intervals((s.start, s.end) for s in hyp_segments.get(rec, [])):
            lo, hi = np.searchsorted(times, [start, end], side="left")
            if hi > lo:
                events.extend(stream[lo:hi])
            else:
                events.append((start, UNK))
        hyp_streams[rec] = [token for _, token in sorted(events)]
    return ref_streams, hyp_streams


# ==================== SPEAKER COUNTS ====================

@dataclass(frozen=True)
class SpeakerCountReport:
    rows: Tuple[Tuple[str, int, int], ...]

    @property
    def mae(self) -> float:
        if not self.rows:
            return 0.0
        return float(np.mean([abs(ref - hyp) for _, ref, hyp in self.rows]))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{'recording_id': rec, 'ref_speakers': ref, 'hyp_speakers': hyp, 'abs_error': abs(ref - hyp)}
             for rec, ref, hyp in self.rows],
            columns=['recording_id', 'ref_speakers', 'hyp_speakers', 'abs_error'],
        )


def speaker_count_report(refs: Mapping[str, Sequence[LabeledSegment]],
                         hyps: Mapping[str, Sequence[LabeledSegment]]) -> SpeakerCountReport:
    """
    Distinct speaker labels per recording in ref and hyp, with their mean absolute error

    Args:
        refs: recording id -> reference speaker segments
        hyps: recording id -> hypothesis speaker segments

    Returns:
        SpeakerCountReport sorted by recording id
    """
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise CoverageError(f"no hypothesis for {', '.join(missing)}")
    extra = sorted(set(hyps) - set(refs))
    if extra:
        logger.warning("speaker_count_unscored_recordings", recordings=extra)
    rows = tuple(
        (rec, len({s.label for s in refs[rec]}), len({s.label for s in hyps[rec]}))
        for rec in sorted(refs)
    )
    return SpeakerCountReport(rows=rows)
