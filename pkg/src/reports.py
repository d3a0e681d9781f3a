"""
Report emission
Deterministic CSV tables, SVG charts for segment durations and speaker counts,
and the JSON run report
"""

import io
import time
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import pandas as pd
import structlog
from pydantic import BaseModel, Field

import config
from src import __version__
from src.metrics import DerBreakdown, SpeakerCountReport
from src.utils import LabeledSegment, atomic_write_bytes, atomic_write_text

logger = structlog.get_logger(__name__)

plt.rcParams['svg.hashsalt'] = config.SVG_HASHSALT

HISTOGRAM_COLUMNS = ['bin_start', 'bin_end', 'count']
DER_COLUMNS = ['recording_id', 'missed', 'false_alarm', 'confusion', 'ref_speech', 'der']


# ==================== TABLES ====================

def write_csv(path: Union[str, Path], frame: pd.DataFrame) -> Path:
    """CSV with fixed float format and \\n line endings, written atomically"""
    text = frame.to_csv(index=False, float_format=config.CSV_FLOAT_FORMAT, lineterminator="\n")
    return atomic_write_text(path, text)


def histogram_edges() -> np.ndarray:
    lo, hi = config.HISTOGRAM_LOG10_RANGE
    n_bins = int(round((hi - lo) * config.HISTOGRAM_BINS_PER_DECADE))
    return np.linspace(lo, hi, n_bins + 1)


def duration_histogram(durations: Sequence[float]) -> pd.DataFrame:
    """
    Segment counts in log10-spaced duration bins

    Durations outside the bin range land in the first or last bin. Empty input gives
    an empty table with the header only.
    """
    if len(durations) == 0:
        return pd.DataFrame(columns=HISTOGRAM_COLUMNS)
    edges = histogram_edges()
    log_durations = np.clip(np.log10(np.asarray(durations, dtype=np.float64)), edges[0], edges[-1])
    counts, _ = np.histogram(log_durations, bins=edges)
    return pd.DataFrame({
        'bin_start': 10 ** edges[:-1],
        'bin_end': 10 ** edges[1:],
        'count': counts.astype(int),
    }, columns=HISTOGRAM_COLUMNS)


def median_bin(histogram: pd.DataFrame) -> Optional[Dict[str, float]]:
    """Bounds of the bin holding the median segment"""
    if histogram.empty or histogram['count'].sum() == 0:
        return None
    cumulative = histogram['count'].cumsum()
    row = histogram[cumulative >= histogram['count'].sum() / 2].iloc[0]
    return {'bin_start': float(row['bin_start']), 'bin_end': float(row['bin_end'])}


def segment_durations(segments: Mapping[str, Sequence[LabeledSegment]], speech_only: bool = True) -> List[float]:
    return [seg.duration for rec in sorted(segments) for seg in segments[rec]
            if seg.is_speech or not speech_only]


def speaker_count_frame(report: SpeakerCountReport) -> pd.DataFrame:
    """One row per recording plus an MAE footer row"""
    frame = report.to_frame()
    footer = pd.DataFrame([{'recording_id': 'MAE', 'ref_speakers': pd.NA, 'hyp_speakers': pd.NA,
                            'abs_error': report.mae}], columns=frame.columns)
    combined = pd.concat([frame, footer], ignore_index=True) if not frame.empty else footer
    return combined.astype({'ref_speakers': 'Int64', 'hyp_speakers': 'Int64', 'abs_error': float})


def der_frame(total: DerBreakdown, per_recording: Mapping[str, DerBreakdown]) -> pd.DataFrame:
    rows = []
    for rec, breakdown in list(sorted(per_recording.items())) + [('TOTAL', total)]:
        rows.append({
            'recording_id': rec,
            'missed': breakdown.missed,
            'false_alarm': breakdown.false_alarm,
            'confusion': breakdown.confusion,
            'ref_speech': breakdown.ref_speech,
            'der': breakdown.der if breakdown.ref_speech > 0 else np.nan,
        })
    return pd.DataFrame(rows, columns=DER_COLUMNS)


# ==================== PLOTS ====================

def _save_svg(fig, path: Union[str, Path]) -> Path:
    buffer = io.BytesIO()
    fig.savefig(buffer, format='svg', metadata={'Date': None})
    plt.close(fig)
    return atomic_write_bytes(path, buffer.getvalue())


def plot_duration_histogram(histogram: pd.DataFrame, path: Union[str, Path]) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    if not histogram.empty:
        positions = np.arange(len(histogram))
        ax.bar(positions, histogram['count'], color=config.COLORS['histogram'], width=0.9)
        ax.set_xticks(positions)
        ax.set_xticklabels([f"{v:g}" for v in histogram['bin_start'].round(3)], rotation=60, fontsize=7)
    ax.set_xlabel("Segment duration (s, lower bin edge)")
    ax.set_ylabel("Segments")
    fig.tight_layout()
    return _save_svg(fig, path)


def plot_speaker_counts(report: SpeakerCountReport, path: Union[str, Path]) -> Path:
    fig, ax = plt.subplots(figsize=(max(6, 0.35 * len(report.rows)), 4))
    if report.rows:
        positions = np.arange(len(report.rows))
        ax.bar(positions - 0.2, [ref for _, ref, _ in report.rows], width=0.4,
               color=config.COLORS['reference'], label="reference")
        ax.bar(positions + 0.2, [hyp for _, _, hyp in report.rows], width=0.4,
               color=config.COLORS['hypothesis'], label="estimated")
        ax.set_xticks(positions)
        ax.set_xticklabels([rec for rec, _, _ in report.rows], rotation=60, fontsize=7)
        ax.legend()
    ax.set_ylabel("Speakers")
    ax.set_title(f"MAE {report.mae:.2f}")
    fig.tight_layout()
    return _save_svg(fig, path)


# ==================== RUN REPORT ====================

class RunReport(BaseModel):
    command: str
    version: str = __version__
    parameters: Dict[str, Any] = Field(default_factory=dict)
    metrics: Dict[str, Any] = Field(default_factory=dict)
    per_recording: Dict[str, Dict[str, Any]] = Field(default_factory=dict)
    artifacts: List[str] = Field(default_factory=list)
    wall_time: float = 0.0

    def write(self, out_dir: Union[str, Path], started: Optional[float] = None) -> Path:
        if started is not None:
            self.wall_time = round(time.perf_counter() - started, 3)
        path = Path(out_dir) / "run_report.json"
        atomic_write_text(path, self.model_dump_json(indent=2) + "\n")
        logger.info("run_report_written", path=str(path), command=self.command)
        return path
