"""
Acoustic frontend
WAV ingestion, MFCC extraction, regression deltas and frame context stacking
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
import soundfile as sf
import structlog
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.fft import dct

import config
from src.errors import (
    EmptyFeatureError,
    FormatError,
    SampleRateMismatchError,
    UnsupportedFormatError,
    UsageError,
)
from src.utils import LabeledSegment, speech_intervals

logger = structlog.get_logger(__name__)

PCM16_SCALE = 32768.0


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int
    recording_id: str

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Frames x coefficients, row i covering [i / frame_rate, (i + 1) / frame_rate)"""

    rows: np.ndarray
    frame_rate: float
    recording_id: str = ""

    @property
    def n_frames(self) -> int:
        return int(self.rows.shape[0])

    @property
    def dim(self) -> int:
        return int(self.rows.shape[1])

    def with_rows(self, rows: np.ndarray) -> "FeatureMatrix":
        return FeatureMatrix(rows=rows, frame_rate=self.frame_rate, recording_id=self.recording_id)


class FrameSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    window_len: float = Field(default=config.FRONTEND_DEFAULTS['window_len'], gt=0)
    hop: float = Field(default=config.FRONTEND_DEFAULTS['hop'], gt=0)
    num_ceps: int = Field(default=config.FRONTEND_DEFAULTS['num_ceps'], ge=1)
    include_deltas: bool = config.FRONTEND_DEFAULTS['include_deltas']
    sample_rate: Optional[int] = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _hop_within_window(self):
        if self.hop > self.window_len:
            raise ValueError("hop must not exceed window_len")
        return self

    @property
    def dim(self) -> int:
        return self.num_ceps * (3 if self.include_deltas else 1)


# ---- WAV ----

def _check_riff(path: Path) -> None:
    """Walk the RIFF chunks; a data chunk running past end of file is a format error"""
    size = path.stat().st_size
    with path.open("rb") as handle:
        header = handle.read(12)
        if len(header) < 12 or header[:4] != b"RIFF" or header[8:12] != b"WAVE":
            raise FormatError("not a RIFF/WAVE file", path=path)
        offset = 12
        seen_fmt = False
        while offset + 8 <= size:
            handle.seek(offset)
            chunk_id, chunk_size = struct.unpack("<4sI", handle.read(8))
            body = offset + 8
            if chunk_id == b"fmt ":
                seen_fmt = True
            elif chunk_id == b"data":
                if not seen_fmt:
                    raise FormatError("data chunk before fmt chunk", path=path)
                if body + chunk_size > size:
                    raise FormatError(
                        f"truncated data chunk: header says {chunk_size} bytes, "
                        f"{size - body} present",
                        path=path,
                    )
                return
            offset = body + chunk_size + (chunk_size & 1)
    raise FormatError("no data chunk", path=path)


def read_wav(path: Union[str, Path], recording_id: Optional[str] = None) -> AudioBuffer:
    """
    Read a mono PCM16 RIFF/WAVE file

    Args:
        path: WAV file
        recording_id: Defaults to the file stem

    Returns:
        AudioBuffer with samples scaled by 1/32768
    """
    path = Path(path)
    if not path.exists():
        raise FormatError("file not found", path=path)
    _check_riff(path)

    try:
        info = sf.info(str(path))
    except RuntimeError as e:
        raise FormatError(f"unreadable WAV header: {e}", path=path) from e
    if info.channels != 1:
        raise UnsupportedFormatError(f"{path}: {info.channels} channels, expected mono")
    if info.subtype != "PCM_16":
        raise UnsupportedFormatError(f"{path}: sample format {info.subtype}, expected PCM_16")

    try:
        pcm, sample_rate = sf.read(str(path), dtype="int16", always_2d=False)
    except RuntimeError as e:
        raise FormatError(f"unreadable WAV payload: {e}", path=path) from e

    samples = np.asarray(pcm, dtype=np.float64) / PCM16_SCALE
    return AudioBuffer(samples=samples, sample_rate=int(sample_rate),
                       recording_id=recording_id or path.stem)


def write_wav(path: Union[str, Path], audio: AudioBuffer) -> None:
    """Write samples in [-1, 1] as mono PCM16"""
    pcm = np.clip(np.round(audio.samples * PCM16_SCALE), -32768, 32767).astype(np.int16)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), pcm, audio.sample_rate, subtype="PCM_16", format="WAV")


# ---- MFCC ----

def frame_count(num_samples: int, window_samples: int, hop_samples: int) -> int:
    if num_samples < window_samples:
        return 0
    return (num_samples - window_samples) // hop_samples + 1


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_filterbank(n_filters: int, nfft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters on the mel scale, shape (n_filters, nfft // 2 + 1)"""
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2.0), n_filters + 2))
    freqs = np.linspace(0.0, sample_rate / 2.0, nfft // 2 + 1)
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (centre - lower)
    falling = (upper - freqs[None, :]) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling))


def num_mel_filters(sample_rate: int) -> int:
    if sample_rate <= 8000:
        return config.MEL_FILTERS_NARROWBAND
    return config.MEL_FILTERS_WIDEBAND


def compute_mfcc(audio: AudioBuffer, spec: FrameSpec) -> FeatureMatrix:
    """
    MFCCs with log-energy in place of c0

    Pre-emphasis, Hamming window, power spectrum, mel filterbank, log, DCT-II.
    Deltas are appended when spec.include_deltas is set.

    Args:
        audio: Mono buffer
        spec: Framing and cepstral configuration

    Returns:
        FeatureMatrix at frame_rate = sample_rate / hop_samples
    """
    if spec.sample_rate is not None and spec.sample_rate != audio.sample_rate:
        raise SampleRateMismatchError(
            f"{audio.recording_id}: sample rate {audio.sample_rate} Hz, expected {spec.sample_rate} Hz"
        )

    window_samples = int(round(spec.window_len * audio.sample_rate))
    hop_samples = int(round(spec.hop * audio.sample_rate))
    n_frames = frame_count(len(audio.samples), window_samples, hop_samples)
    if n_frames == 0:
        raise EmptyFeatureError(
            f"{audio.recording_id}: {len(audio.samples)} samples is shorter than one "
            f"{window_samples}-sample window"
        )

    n_filters = num_mel_filters(audio.sample_rate)
    if spec.num_ceps > n_filters:
        raise UsageError(f"num_ceps={spec.num_ceps} exceeds the {n_filters} mel filters")

    samples = audio.samples
    emphasized = np.concatenate([samples[:1], samples[1:] - config.PREEMPHASIS * samples[:-1]])
    frames = sliding_window_view(emphasized, window_samples)[::hop_samples][:n_frames]
    frames = frames * np.hamming(window_samples)

    nfft = 1 << (window_samples - 1).bit_length()
    power = np.abs(np.fft.rfft(frames, n=nfft, axis=1)) ** 2 / nfft

    energy = np.maximum(power.sum(axis=1), config.ENERGY_FLOOR)
    filtered = np.maximum(power @ mel_filterbank(n_filters, nfft, audio.sample_rate).T,
                          config.ENERGY_FLOOR)
    ceps = dct(np.log(filtered), type=2, axis=1, norm="ortho")[:, :spec.num_ceps]
    ceps[:, 0] = np.log(energy)

    feats = FeatureMatrix(rows=ceps, frame_rate=audio.sample_rate / hop_samples,
                          recording_id=audio.recording_id)
    if spec.include_deltas:
        feats = append_deltas(feats)
    return feats


# ---- deltas / context ----

def _regression_deltas(rows: np.ndarray, half_window: int = config.DELTA_WINDOW) -> np.ndarray:
    n_frames = rows.shape[0]
    padded = np.pad(rows, ((half_window, half_window), (0, 0)), mode="edge")
    denom = 2.0 * sum(n * n for n in range(1, half_window + 1))
    out = np.zeros_like(rows, dtype=np.float64)
    for n in range(1, half_window + 1):
        out += n * (padded[half_window + n:half_window + n + n_frames]
                    - padded[half_window - n:half_window - n + n_frames])
    return out / denom


def append_deltas(feats: FeatureMatrix) -> FeatureMatrix:
    """Append first and second order regression deltas (+-2 frames, edges replicated)"""
    if feats.n_frames == 0:
        raise EmptyFeatureError(f"{feats.recording_id}: no frames to differentiate")
    delta = _regression_deltas(feats.rows)
    delta2 = _regression_deltas(delta)
    return feats.with_rows(np.hstack([feats.rows, delta, delta2]))


def stack_context(feats: FeatureMatrix, context: int) -> FeatureMatrix:
    """
    Concatenate `context` consecutive frames centered on every frame

    Row i holds input rows i - context // 2 ... i + ceil(context / 2) - 1, clamped to the edges.
    """
    if context < 1:
        raise UsageError(f"context must be >= 1, got {context}")
    if context == 1:
        return feats
    n_frames, dim = feats.rows.shape
    if n_frames == 0:
        return feats.with_rows(np.zeros((0, dim * context)))

    left = context // 2
    right = context - left - 1
    padded = np.pad(feats.rows, ((left, right), (0, 0)), mode="edge")
    windows = sliding_window_view(padded, context, axis=0)  # (n_frames, dim, context)
    stacked = np.ascontiguousarray(windows.transpose(0, 2, 1)).reshape(n_frames, context * dim)
    return feats.with_rows(stacked)


def frame_labels(segments: Iterable[LabeledSegment], n_frames: int, frame_rate: float) -> np.ndarray:
    """Per-frame speech flags: frame i is speech iff (i + 0.5) / frame_rate falls in a speech segment"""
    centres = (np.arange(n_frames) + 0.5) / frame_rate
    flags = np.zeros(n_frames, dtype=bool)
    for start, end in speech_intervals(segments):
        lo, hi = np.searchsorted(centres, [start, end], side="left")
        flags[lo:hi] = True
    return flags
