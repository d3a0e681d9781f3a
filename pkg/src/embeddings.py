"""
Speaker embeddings
Chunking policy, toy statistics extractor, embedding file ingestion, global mean +
PCA whitening, and concatenation fusion
"""

from collections import defaultdict
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from scipy.linalg import eigh

import config
from src import data_loader
from src.errors import AlignmentError, EmptyChunkError, FormatError, RankError, ShapeError, UsageError
from src.frontend import FeatureMatrix
from src.utils import LabeledSegment

logger = structlog.get_logger(__name__)

KINDS = ("ivector", "xvector", "fused", "toy")
EmbeddingKey = Tuple[str, float, float]

# Chunk boundary comparisons
_EPS = 1e-9


def embedding_key(recording_id: str, start: float, end: float) -> EmbeddingKey:
    """Times rounded to the microsecond so keys survive text round trips"""
    return (recording_id, round(float(start), 6), round(float(end), 6))


@dataclass(frozen=True)
class Chunk:
    recording_id: str
    start: float
    end: float
    source_segment: int = 0
    speaker: Optional[str] = None
    sources: Tuple[Tuple[float, float], ...] = ()

    def __post_init__(self):
        if not self.end > self.start:
            raise ShapeError(f"{self.recording_id}: chunk end {self.end} <= start {self.start}")

    @property
    def intervals(self) -> Tuple[Tuple[float, float], ...]:
        return self.sources or ((self.start, self.end),)

    @property
    def duration(self) -> float:
        return float(sum(e - s for s, e in self.intervals))

    @property
    def key(self) -> EmbeddingKey:
        return embedding_key(self.recording_id, self.start, self.end)


class EmbeddingSet:
    """(recording, start, end) -> vector, all of one dimension, with optional speaker labels"""

    def __init__(self, entries: Mapping[EmbeddingKey, np.ndarray], dim: int, kind: str = "xvector",
                 speakers: Optional[Mapping[EmbeddingKey, str]] = None):
        if kind not in KINDS:
            raise UsageError(f"unknown embedding kind {kind!r}")
        for key, vector in entries.items():
            if vector.shape != (dim,):
                raise ShapeError(f"{key}: vector of shape {vector.shape}, expected ({dim},)")
        self.entries: Dict[EmbeddingKey, np.ndarray] = dict(entries)
        self.dim = dim
        self.kind = kind
        self.speakers: Dict[EmbeddingKey, str] = dict(speakers or {})

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self) -> List[EmbeddingKey]:
        return sorted(self.entries)

    def recordings(self) -> List[str]:
        return sorted({key[0] for key in self.entries})

    def matrix(self, recording_id: Optional[str] = None) -> Tuple[List[EmbeddingKey], np.ndarray]:
        """Time-ordered keys and the stacked vectors, optionally for one recording"""
        keys = [k for k in self.keys() if recording_id is None or k[0] == recording_id]
        if not keys:
            return [], np.zeros((0, self.dim))
        return keys, np.vstack([self.entries[k] for k in keys])

    def labels(self, keys: Sequence[EmbeddingKey]) -> List[str]:
        missing = [k for k in keys if k not in self.speakers]
        if missing:
            raise UsageError(f"{len(missing)} vectors carry no speaker label, e.g. {missing[0]}")
        return [self.speakers[k] for k in keys]

    def subset(self, recordings: Iterable[str]) -> "EmbeddingSet":
        wanted = set(recordings)
        entries = {k: v for k, v in self.entries.items() if k[0] in wanted}
        speakers = {k: v for k, v in self.speakers.items() if k[0] in wanted}
        return EmbeddingSet(entries, self.dim, self.kind, speakers)


# ==================== CHUNKING ====================

def make_chunks(
    segments: Sequence[LabeledSegment],
    chunk_len: float = config.CHUNKING_DEFAULTS['chunk_len'],
    step: float = config.CHUNKING_DEFAULTS['step'],
    min_len: float = config.CHUNKING_DEFAULTS['min_len'],
    recording_id: str = "",
) -> List[Chunk]:
    """
    Sliding chunks inside every speech segment

    Chunks start at segment_start + k * step while they fit. A tail left uncovered gets a
    residual chunk from the next grid start to the segment end when that is at least
    min_len long, otherwise the last chunk is stretched to the segment end. Segments
    shorter than chunk_len give one whole-segment chunk if they reach min_len.

    Args:
        segments: Speech segments of one recording
        chunk_len: Chunk length in seconds
        step: Hop between chunk starts, 0 < step <= chunk_len
        min_len: Shortest chunk kept
        recording_id: Stamped on every chunk

    Returns:
        Chunks in segment order
    """
    if chunk_len <= 0 or not 0 < step <= chunk_len:
        raise UsageError(f"need chunk_len > 0 and 0 < step <= chunk_len, got {chunk_len}, {step}")

    chunks: List[Chunk] = []
    for index, seg in enumerate(segments):
        if not seg.is_speech:
            continue
        start, end = seg.start, seg.end
        if end - start < chunk_len - _EPS:
            if end - start >= min_len - _EPS:
                chunks.append(Chunk(recording_id, start, end, index))
            continue

        pieces: List[Tuple[float, float]] = []
        k = 0
        while start + k * step + chunk_len <= end + _EPS:
            piece_start = start + k * step
            pieces.append((piece_start, min(piece_start + chunk_len, end)))
            k += 1
        if end - pieces[-1][1] > _EPS:
            residual_start = start + k * step
            if end - residual_start >= min_len - _EPS:
                pieces.append((residual_start, end))
            else:
                pieces[-1] = (pieces[-1][0], end)
        chunks.extend(Chunk(recording_id, s, e, index) for s, e in pieces)
    return chunks


def merge_speaker_chunks(
    segments: Sequence[LabeledSegment],
    target_len: float = config.CHUNKING_DEFAULTS['train_chunk_len'],
    recording_id: str = "",
) -> List[Chunk]:
    """
    Concatenate each speaker's segments in time order and cut the stream into target_len pieces

    Args:
        segments: Speaker-labeled segments of one recording
        target_len: Piece length in seconds; the last piece per speaker may be shorter
        recording_id: Stamped on every chunk

    Returns:
        Chunks with `speaker` and their real-time `sources`, speakers in sorted order
    """
    if target_len <= 0:
        raise UsageError("target_len must be positive")
    by_speaker: Dict[str, List[Tuple[int, LabeledSegment]]] = defaultdict(list)
    for index, seg in enumerate(segments):
        if seg.is_speech:
            by_speaker[seg.label].append((index, seg))

    chunks: List[Chunk] = []
    for speaker in sorted(by_speaker):
        current: List[Tuple[float, float]] = []
        first_index = 0
        filled = 0.0
        for index, seg in sorted(by_speaker[speaker], key=lambda item: (item[1].start, item[1].end)):
            cursor = seg.start
            while cursor < seg.end - _EPS:
                if not current:
                    first_index = index
                take = min(seg.end - cursor, target_len - filled)
                current.append((cursor, cursor + take))
                filled += take
                cursor += take
                if filled >= target_len - _EPS:
                    chunks.append(Chunk(recording_id, current[0][0], current[-1][1], first_index,
                                        speaker, tuple(current)))
                    current, filled = [], 0.0
        if current:
            chunks.append(Chunk(recording_id, current[0][0], current[-1][1], first_index,
                                speaker, tuple(current)))
    return chunks


# ==================== TOY EXTRACTOR ====================

def chunk_frames(features: FeatureMatrix, chunk: Chunk) -> np.ndarray:
    """Rows whose frame start time i / frame_rate lies in one of the chunk's intervals"""
    blocks = []
    for start, end in chunk.intervals:
        lo = max(0, int(np.ceil(start * features.frame_rate - 1e-6)))
        hi = min(features.n_frames, int(np.ceil(end * features.frame_rate - 1e-6)))
        if hi > lo:
            blocks.append(features.rows[lo:hi])
    if not blocks:
        raise EmptyChunkError(f"{chunk.recording_id}: chunk [{chunk.start}, {chunk.end}) covers no frames")
    return np.vstack(blocks)


def chunk_statistics(features: FeatureMatrix, chunk: Chunk) -> np.ndarray:
    """Per-coefficient mean and standard deviation, concatenated"""
    rows = chunk_frames(features, chunk)
    return np.concatenate([rows.mean(axis=0), rows.std(axis=0)])


@lru_cache(maxsize=32)
def _projection(seed: int, in_dim: int, out_dim: int) -> np.ndarray:
    matrix = np.random.default_rng(seed).standard_normal((in_dim, out_dim)) / np.sqrt(in_dim)
    matrix.setflags(write=False)
    return matrix


def extract_toy_embedding(features: FeatureMatrix, chunk: Chunk, out_dim: int = config.EMBEDDING_DEFAULTS['toy_dim'],
                          seed: int = config.DEFAULT_SEED) -> np.ndarray:
    """Chunk mean+std statistics through a seeded fixed random projection"""
    stats = chunk_statistics(features, chunk)
    return stats @ _projection(seed, stats.shape[0], out_dim)


def extract_embeddings(features: FeatureMatrix, chunks: Sequence[Chunk], out_dim: int,
                       seed: int = config.DEFAULT_SEED) -> EmbeddingSet:
    """Toy embeddings for every chunk of one recording; speaker labels are kept when present"""
    entries: Dict[EmbeddingKey, np.ndarray] = {}
    speakers: Dict[EmbeddingKey, str] = {}
    for chunk in chunks:
        entries[chunk.key] = extract_toy_embedding(features, chunk, out_dim, seed)
        if chunk.speaker is not None:
            speakers[chunk.key] = chunk.speaker
    return EmbeddingSet(entries, out_dim, "toy", speakers)


def merge_sets(sets: Sequence[EmbeddingSet]) -> EmbeddingSet:
    """Union of disjoint sets of equal dim and kind"""
    if not sets:
        raise UsageError("nothing to merge")
    entries: Dict[EmbeddingKey, np.ndarray] = {}
    speakers: Dict[EmbeddingKey, str] = {}
    for part in sets:
        if part.dim != sets[0].dim:
            raise ShapeError(f"cannot merge dims {part.dim} and {sets[0].dim}")
        overlap = set(entries) & set(part.entries)
        if overlap:
            raise FormatError(f"duplicate embedding key {sorted(overlap)[0]}")
        entries.update(part.entries)
        speakers.update(part.speakers)
    return EmbeddingSet(entries, sets[0].dim, sets[0].kind, speakers)


# ==================== FILES ====================

def load_embeddings(path: Union[str, Path], kind: str = "xvector") -> EmbeddingSet:
    """
    Read an EMBV binary or text embedding file

    Raises:
        FormatError: mixed dimensions or duplicate (recording, interval) keys
    """
    rows, dim = data_loader.read_embedding_rows(path)
    entries: Dict[EmbeddingKey, np.ndarray] = {}
    for rec, start, end, vector in rows:
        key = embedding_key(rec, start, end)
        if key in entries:
            raise FormatError(f"duplicate key {key}", path=path)
        if len(vector) != dim:
            raise FormatError(f"{key}: dimension {len(vector)} differs from {dim}", path=path)
        entries[key] = vector
    logger.info("embeddings_loaded", path=str(path), count=len(entries), dim=dim)
    return EmbeddingSet(entries, dim, kind)


def save_embeddings(path: Union[str, Path], embeddings: EmbeddingSet, binary: bool = True) -> Path:
    rows = [(k[0], k[1], k[2], embeddings.entries[k]) for k in embeddings.keys()]
    if binary:
        return data_loader.write_embv(path, rows, embeddings.dim)
    return data_loader.write_embedding_text(path, rows)


# ==================== WHITENING ====================

@dataclass(frozen=True, eq=False)
class WhitenModel:
    mean: np.ndarray
    transform: np.ndarray  # (out_dim, in_dim)

    @property
    def in_dim(self) -> int:
        return int(self.transform.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.transform.shape[0])

    def apply(self, vectors: np.ndarray) -> np.ndarray:
        if vectors.shape[-1] != self.in_dim:
            raise ShapeError(f"vectors of dim {vectors.shape[-1]}, whitener expects {self.in_dim}")
        return (vectors - self.mean) @ self.transform.T

    def apply_set(self, embeddings: EmbeddingSet) -> EmbeddingSet:
        keys, matrix = embeddings.matrix()
        white = self.apply(matrix) if keys else np.zeros((0, self.out_dim))
        return EmbeddingSet(dict(zip(keys, white)), self.out_dim, embeddings.kind, embeddings.speakers)

    def save(self, path: Union[str, Path]) -> Path:
        return data_loader.write_whitener(path, self.mean, self.transform)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "WhitenModel":
        mean, transform = data_loader.read_whitener(path)
        return cls(mean=mean, transform=transform)


def fit_whitener(*sets: EmbeddingSet, dim: Optional[int] = None) -> WhitenModel:
    """
    Global mean and Lambda^(-1/2) U^T from the pooled sample covariance

    Eigenvalues are floored at WHITEN_EIGEN_FLOOR * trace / dim. Rows are ordered by
    decreasing eigenvalue; `dim` keeps only the leading rows.

    Args:
        sets: Embedding sets pooled for the fit (e.g. train and dev)
        dim: Optional output dimension

    Returns:
        WhitenModel
    """
    matrices = [s.matrix()[1] for s in sets if len(s)]
    if not matrices:
        raise RankError("no vectors to fit a whitener")
    pooled = np.vstack(matrices)
    n, in_dim = pooled.shape
    if n < in_dim + 1:
        raise RankError(f"{n} vectors cannot whiten {in_dim} dimensions (need {in_dim + 1})")

    mean = pooled.mean(axis=0)
    centred = pooled - mean
    covariance = centred.T @ centred / n
    eigvals, eigvecs = eigh(covariance)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    trace = float(eigvals.sum())
    if trace <= 0 or eigvals[0] <= 0:
        raise RankError("embeddings have zero variance")

    eigvals = np.maximum(eigvals, config.WHITEN_EIGEN_FLOOR * trace / in_dim)
    # fix eigenvector signs: largest-magnitude component positive
    pivots = np.argmax(np.abs(eigvecs), axis=0)
    eigvecs = eigvecs * np.sign(eigvecs[pivots, np.arange(in_dim)])
    transform = eigvecs.T / np.sqrt(eigvals)[:, None]
    if dim is not None:
        if not 1 <= dim <= in_dim:
            raise UsageError(f"whitened dim must lie in [1, {in_dim}]")
        transform = transform[:dim]
    logger.info("whitener_fitted", vectors=n, in_dim=in_dim, out_dim=transform.shape[0])
    return WhitenModel(mean=mean, transform=transform)


# ==================== FUSION ====================

def fuse(a: EmbeddingSet, b: EmbeddingSet) -> EmbeddingSet:
    """Per-key concatenation [a, b]; key sets must be identical"""
    if set(a.entries) != set(b.entries):
        only_a = len(set(a.entries) - set(b.entries))
        only_b = len(set(b.entries) - set(a.entries))
        raise AlignmentError(f"embedding keys differ: {only_a} only in first, {only_b} only in second")
    entries = {key: np.concatenate([a.entries[key], b.entries[key]]) for key in a.entries}
    speakers = dict(b.speakers)
    speakers.update(a.speakers)
    return EmbeddingSet(entries, a.dim + b.dim, "fused", speakers)
