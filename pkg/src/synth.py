"""
Synthetic corpus generator
Speakers are band-pass filtered noise profiles at varying levels; the gaps between turns
carry background noise and speech-like non-speech bursts. Writes WAV audio plus SAD
labels, RTTM, transcripts and train/dev lists
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from pydantic import BaseModel, Field, model_validator
from scipy.signal import butter, sosfilt

import config
from src import data_loader
from src.frontend import AudioBuffer, write_wav
from src.utils import LabeledSegment, NON_SPEECH, SPEECH

logger = structlog.get_logger(__name__)

# Two resonance bands per speaker: one low, one high
LOW_BANDS_HZ = (280.0, 420.0, 620.0, 900.0)
HIGH_BANDS_HZ = (1350.0, 1900.0, 2700.0)
BAND_WIDTH = 0.35          # relative to the centre frequency
HIGH_BAND_GAIN = 0.6
MODULATION_HZ = 4.0
SECONDS_PER_WORD = 0.35

# Pauses inside a turn stay speech in the reference
PAUSE_RANGE_S = (0.08, 0.2)
PAUSE_MIN_TURN_S = 1.0

# Non-speech bursts: stationary band noise somewhere in the speech band, placed in gaps
BURST_RANGE_S = (0.15, 0.8)
BURST_MARGIN_S = 0.05
BURST_CENTRE_HZ = (500.0, 2500.0)
BURST_WIDTH = 0.5
BURST_LEVEL_DB = (-12.0, -3.0)

VOCABULARY = (
    "go", "copy", "roger", "houston", "flight", "engine", "burn", "orbit", "signal", "check",
    "status", "pressure", "oxygen", "loop", "console", "data", "track", "range", "contact", "standby",
)


class SynthConfig(BaseModel):
    recordings: int = Field(default=config.SYNTH_DEFAULTS['recordings'], ge=2)
    speakers_per_recording: int = Field(default=config.SYNTH_DEFAULTS['speakers_per_recording'], ge=1)
    speaker_pool: int = Field(default=config.SYNTH_DEFAULTS['speaker_pool'], ge=1,
                              le=len(LOW_BANDS_HZ) * len(HIGH_BANDS_HZ))
    duration: float = Field(default=config.SYNTH_DEFAULTS['duration'], gt=0)
    sample_rate: int = Field(default=config.SYNTH_DEFAULTS['sample_rate'], ge=8000)
    min_turn: float = Field(default=config.SYNTH_DEFAULTS['min_turn'], gt=0)
    max_turn: float = Field(default=config.SYNTH_DEFAULTS['max_turn'], gt=0)
    min_gap: float = Field(default=config.SYNTH_DEFAULTS['min_gap'], gt=0)
    max_gap: float = Field(default=config.SYNTH_DEFAULTS['max_gap'], gt=0)
    speech_level: float = Field(default=config.SYNTH_DEFAULTS['speech_level'], gt=0, lt=1)
    noise_level: float = Field(default=config.SYNTH_DEFAULTS['noise_level'], ge=0, lt=1)
    level_spread_db: float = Field(default=config.SYNTH_DEFAULTS['level_spread_db'], ge=0)
    fade: float = Field(default=config.SYNTH_DEFAULTS['fade'], ge=0)
    pause_prob: float = Field(default=config.SYNTH_DEFAULTS['pause_prob'], ge=0, le=1)
    burst_prob: float = Field(default=config.SYNTH_DEFAULTS['burst_prob'], ge=0, le=1)
    train_fraction: float = Field(default=0.6, gt=0, lt=1)

    @model_validator(mode='after')
    def _check_ranges(self):
        if self.speakers_per_recording > self.speaker_pool:
            raise ValueError("speakers_per_recording exceeds speaker_pool")
        if self.min_turn > self.max_turn or self.min_gap > self.max_gap:
            raise ValueError("min turn/gap must not exceed max turn/gap")
        if self.duration < self.max_gap + self.min_turn:
            raise ValueError("duration too short for a single turn")
        return self


@dataclass(frozen=True)
class SpeakerProfile:
    name: str
    bands: Tuple[Tuple[float, float], ...]
    gains: Tuple[float, ...]


@dataclass(frozen=True)
class SyntheticRecording:
    recording_id: str
    audio: AudioBuffer
    turns: List[LabeledSegment]
    bursts: List[LabeledSegment] = field(default_factory=list)


def speaker_profiles(count: int) -> List[SpeakerProfile]:
    """Deterministic pool: every (low band, high band) pairing is one speaker"""
    profiles = []
    for index in range(count):
        low = LOW_BANDS_HZ[index % len(LOW_BANDS_HZ)]
        high = HIGH_BANDS_HZ[index // len(LOW_BANDS_HZ)]
        bands = tuple((f * (1 - BAND_WIDTH / 2), f * (1 + BAND_WIDTH / 2)) for f in (low, high))
        profiles.append(SpeakerProfile(name=f"S{index:02d}", bands=bands, gains=(1.0, HIGH_BAND_GAIN)))
    return profiles


def band_noise(rng: np.random.Generator, profile: SpeakerProfile, n_samples: int,
               sample_rate: int, level: float) -> np.ndarray:
    """Filtered noise at RMS `level` with a slow syllable-rate envelope"""
    signal = np.zeros(n_samples)
    for (lo, hi), gain in zip(profile.bands, profile.gains):
        sos = butter(4, [lo, min(hi, 0.45 * sample_rate)], btype='band', fs=sample_rate, output='sos')
        signal += gain * sosfilt(sos, rng.standard_normal(n_samples))
    t = np.arange(n_samples) / sample_rate
    signal *= 0.75 + 0.25 * np.sin(2 * np.pi * MODULATION_HZ * t + rng.uniform(0, 2 * np.pi))
    rms = np.sqrt(np.mean(signal ** 2))
    return signal * (level / rms) if rms > 0 else signal


def turn_envelope(n_samples: int, sample_rate: int, fade: float,
                  pause: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Linear onset/offset ramps of `fade` seconds, zero over an optional [lo, hi) sample pause"""
    envelope = np.ones(n_samples)
    n_fade = min(int(round(fade * sample_rate)), n_samples // 4)
    if n_fade > 0:
        ramp = np.arange(1, n_fade + 1) / (n_fade + 1)
        envelope[:n_fade] = ramp
        envelope[-n_fade:] = ramp[::-1]
    if pause is not None:
        envelope[pause[0]:pause[1]] = 0.0
    return envelope


def burst_noise(rng: np.random.Generator, n_samples: int, sample_rate: int, level: float) -> np.ndarray:
    """Stationary band noise with a random centre in the speech band, at RMS `level`"""
    centre = float(rng.uniform(*BURST_CENTRE_HZ))
    lo, hi = centre * (1 - BURST_WIDTH / 2), min(centre * (1 + BURST_WIDTH / 2), 0.45 * sample_rate)
    sos = butter(4, [lo, hi], btype='band', fs=sample_rate, output='sos')
    signal = sosfilt(sos, rng.standard_normal(n_samples))
    rms = np.sqrt(np.mean(signal ** 2))
    return signal * (level / rms) if rms > 0 else signal


def _turn_pause(rng: np.random.Generator, length: float, sample_rate: int,
                cfg: SynthConfig) -> Optional[Tuple[int, int]]:
    if length < PAUSE_MIN_TURN_S or rng.uniform() >= cfg.pause_prob:
        return None
    duration = float(rng.uniform(*PAUSE_RANGE_S))
    start = float(rng.uniform(0.3, length - 0.3 - duration))
    return int(round(start * sample_rate)), int(round((start + duration) * sample_rate))


def _gap_bursts(rng: np.random.Generator, turns: Sequence[LabeledSegment],
                cfg: SynthConfig) -> List[LabeledSegment]:
    """At most one burst per gap, kept BURST_MARGIN_S away from the neighbouring turns"""
    edges = [0.0] + [x for turn in turns for x in (turn.start, turn.end)] + [cfg.duration]
    bursts = []
    for gap_start, gap_end in zip(edges[::2], edges[1::2]):
        room = gap_end - gap_start - 2 * BURST_MARGIN_S
        if room < BURST_RANGE_S[0] or rng.uniform() >= cfg.burst_prob:
            continue
        duration = round(float(rng.uniform(BURST_RANGE_S[0], min(BURST_RANGE_S[1], room))), 2)
        start = round(float(rng.uniform(gap_start + BURST_MARGIN_S, gap_end - BURST_MARGIN_S - duration)), 2)
        if start < gap_start + BURST_MARGIN_S - 1e-9 or start + duration > gap_end - BURST_MARGIN_S + 1e-9:
            continue
        bursts.append(LabeledSegment(start, round(start + duration, 2), NON_SPEECH))
    return bursts


def synth_recording(recording_id: str, speakers: Sequence[SpeakerProfile], cfg: SynthConfig,
                    rng: np.random.Generator) -> SyntheticRecording:
    """
    Alternating turns of the given speakers, plus non-speech bursts in the gaps

    Turn boundaries are on the 10 ms grid; consecutive turns always change speaker
    when more than one speaker is available. Each turn gets its own level (up to
    level_spread_db below speech_level), faded edges and possibly one short pause
    that the reference still counts as speech.
    """
    sr = cfg.sample_rate
    n_total = int(round(cfg.duration * sr))
    samples = rng.standard_normal(n_total) * cfg.noise_level

    turns: List[LabeledSegment] = []
    t = round(float(rng.uniform(cfg.min_gap, cfg.max_gap)), 2)
    previous = None
    while t + cfg.min_turn <= cfg.duration - cfg.min_gap:
        choices = [s for s in range(len(speakers)) if s != previous] or [0]
        speaker = int(rng.choice(choices))
        length = float(rng.uniform(cfg.min_turn, cfg.max_turn))
        end = round(min(t + length, cfg.duration - cfg.min_gap), 2)
        if end - t < cfg.min_turn - 1e-9:
            break
        lo, hi = int(round(t * sr)), int(round(end * sr))
        level = cfg.speech_level * 10 ** (-float(rng.uniform(0.0, cfg.level_spread_db)) / 20)
        envelope = turn_envelope(hi - lo, sr, cfg.fade, _turn_pause(rng, end - t, sr, cfg))
        samples[lo:hi] += band_noise(rng, speakers[speaker], hi - lo, sr, level) * envelope
        turns.append(LabeledSegment(t, end, speakers[speaker].name))
        previous = speaker
        t = round(end + float(rng.uniform(cfg.min_gap, cfg.max_gap)), 2)

    bursts = _gap_bursts(rng, turns, cfg)
    for burst in bursts:
        lo, hi = int(round(burst.start * sr)), int(round(burst.end * sr))
        level = cfg.speech_level * 10 ** (float(rng.uniform(*BURST_LEVEL_DB)) / 20)
        samples[lo:hi] += burst_noise(rng, hi - lo, sr, level)

    audio = AudioBuffer(np.clip(samples, -0.99, 0.99), sr, recording_id)
    return SyntheticRecording(recording_id, audio, turns, bursts)


def sad_reference(turns: Sequence[LabeledSegment], duration: float) -> List[LabeledSegment]:
    """Speech turns plus the non-speech gaps, covering [0, duration]"""
    out: List[LabeledSegment] = []
    cursor = 0.0
    for turn in sorted(turns, key=lambda seg: seg.start):
        if turn.start > cursor + 1e-9:
            out.append(LabeledSegment(cursor, turn.start, NON_SPEECH))
        out.append(LabeledSegment(turn.start, turn.end, SPEECH))
        cursor = turn.end
    if duration > cursor + 1e-9:
        out.append(LabeledSegment(cursor, duration, NON_SPEECH))
    return out


def turn_transcripts(recording_id: str, turns: Sequence[LabeledSegment],
                     rng: np.random.Generator) -> Dict[str, List[str]]:
    """One utterance per turn, roughly one word per SECONDS_PER_WORD"""
    transcripts = {}
    for turn in turns:
        n_words = max(1, int(round(turn.duration / SECONDS_PER_WORD)))
        words = [VOCABULARY[i] for i in rng.integers(0, len(VOCABULARY), n_words)]
        transcripts[data_loader.make_utt_id(recording_id, turn.start, turn.end)] = words
    return transcripts


def write_corpus(out_dir: Union[str, Path], cfg: SynthConfig, seed: int = config.DEFAULT_SEED) -> Dict[str, int]:
    """
    Generate the corpus under out_dir

    Returns:
        Counts of recordings, turns, train and dev recordings
    """
    out_dir = Path(out_dir)
    audio_dir = out_dir / config.CORPUS_AUDIO_SUBDIR
    audio_dir.mkdir(parents=True, exist_ok=True)
    pool = speaker_profiles(cfg.speaker_pool)

    sad_refs: Dict[str, List[LabeledSegment]] = {}
    speaker_refs: Dict[str, List[LabeledSegment]] = {}
    transcripts: Dict[str, List[str]] = {}
    recording_ids = [f"rec{index:03d}" for index in range(cfg.recordings)]
    for index, rec in enumerate(recording_ids):
        rng = np.random.default_rng([seed, index])
        chosen = sorted(rng.choice(len(pool), cfg.speakers_per_recording, replace=False))
        recording = synth_recording(rec, [pool[i] for i in chosen], cfg, rng)
        write_wav(audio_dir / f"{rec}.wav", recording.audio)
        sad_refs[rec] = sad_reference(recording.turns, recording.audio.duration)
        speaker_refs[rec] = recording.turns
        transcripts.update(turn_transcripts(rec, recording.turns, rng))

    n_train = min(max(1, int(round(cfg.train_fraction * cfg.recordings))), cfg.recordings - 1)
    data_loader.write_label_file(out_dir / config.CORPUS_SAD_REF, sad_refs)
    data_loader.write_rttm(out_dir / config.CORPUS_RTTM_REF, speaker_refs)
    data_loader.write_transcripts(out_dir / config.CORPUS_TRANSCRIPTS, transcripts)
    data_loader.write_id_list(out_dir / config.CORPUS_TRAIN_LIST, recording_ids[:n_train])
    data_loader.write_id_list(out_dir / config.CORPUS_DEV_LIST, recording_ids[n_train:])

    counts = {'recordings': len(recording_ids), 'turns': sum(len(t) for t in speaker_refs.values()),
              'train': n_train, 'dev': len(recording_ids) - n_train}
    logger.info("corpus_written", out_dir=str(out_dir), **counts)
    return counts
