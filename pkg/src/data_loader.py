"""
Data loader for corpus files and model artifacts
Text formats (label files, RTTM, transcripts, TSV manifests, id lists) and the
little-endian binary formats (FEAT, SADM, PLDA, EMBV, WHTN)
"""

import re
import struct
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from src.errors import FormatError, InvalidSegmentError
from src.frontend import FeatureMatrix
from src.sst_select import HypSegment
from src.utils import LabeledSegment, atomic_write_bytes, atomic_write_text, format_time

logger = structlog.get_logger(__name__)

PathLike = Union[str, Path]
SegmentsByRecording = Dict[str, List[LabeledSegment]]
EmbeddingRow = Tuple[str, float, float, np.ndarray]

FORMAT_VERSION = 1


def _lines(path: PathLike) -> Iterator[Tuple[int, List[str]]]:
    """Yield (1-based line number, whitespace fields) for non-blank, non-comment lines"""
    path = Path(path)
    if not path.exists():
        raise FormatError("file not found", path=path)
    with path.open("r", encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            yield number, stripped.split()


def _float(value: str, path: PathLike, line: int, what: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise FormatError(f"{what} is not a number: {value!r}", path=path, line=line) from None


def _segment(start: float, end: float, label: str, path: PathLike, line: int) -> LabeledSegment:
    try:
        return LabeledSegment(start=start, end=end, label=label)
    except InvalidSegmentError as e:
        raise FormatError(str(e), path=path, line=line) from None


def _sorted_segments(by_rec: Dict[str, List[LabeledSegment]]) -> SegmentsByRecording:
    return {rec: sorted(segs, key=lambda s: (s.start, s.end, s.label))
            for rec, segs in sorted(by_rec.items())}


# ==================== LABEL FILES ====================

def read_label_file(path: PathLike) -> SegmentsByRecording:
    """
    Read `<recording_id> <start> <end> <label>` lines

    Returns:
        recording id -> segments sorted by start
    """
    by_rec: Dict[str, List[LabeledSegment]] = defaultdict(list)
    for number, fields in _lines(path):
        if len(fields) < 4:
            raise FormatError(f"expected 4 fields, got {len(fields)}", path=path, line=number)
        start = _float(fields[1], path, number, "start")
        end = _float(fields[2], path, number, "end")
        by_rec[fields[0]].append(_segment(start, end, fields[3], path, number))
    return _sorted_segments(by_rec)


def format_label_lines(segments: SegmentsByRecording) -> str:
    lines = []
    for rec in sorted(segments):
        for seg in sorted(segments[rec], key=lambda s: (s.start, s.end)):
            lines.append(f"{rec} {format_time(seg.start)} {format_time(seg.end)} {seg.label}")
    return "".join(line + "\n" for line in lines)


def write_label_file(path: PathLike, segments: SegmentsByRecording) -> Path:
    return atomic_write_text(path, format_label_lines(segments))


# ==================== RTTM ====================

def read_rttm(path: PathLike) -> SegmentsByRecording:
    """
    Read SPEAKER lines of an RTTM file; other line types are ignored

    Returns:
        recording id -> speaker-labeled segments sorted by start
    """
    by_rec: Dict[str, List[LabeledSegment]] = defaultdict(list)
    for number, fields in _lines(path):
        if fields[0] != "SPEAKER":
            continue
        if len(fields) < 8:
            raise FormatError(f"SPEAKER line needs at least 8 fields, got {len(fields)}",
                              path=path, line=number)
        tbeg = _float(fields[3], path, number, "tbeg")
        tdur = _float(fields[4], path, number, "tdur")
        if tdur <= 0:
            logger.debug("rttm_zero_duration_skipped", path=str(path), line=number)
            continue
        by_rec[fields[1]].append(_segment(tbeg, tbeg + tdur, fields[7], path, number))
    return _sorted_segments(by_rec)


def format_rttm_lines(segments: SegmentsByRecording) -> str:
    lines = []
    for rec in sorted(segments):
        for seg in sorted(segments[rec], key=lambda s: (s.start, s.end, s.label)):
            lines.append(
                f"SPEAKER {rec} 1 {format_time(seg.start)} {format_time(seg.end - seg.start)} "
                f"<NA> <NA> {seg.label} <NA> <NA>"
            )
    return "".join(line + "\n" for line in lines)


def write_rttm(path: PathLike, segments: SegmentsByRecording) -> Path:
    return atomic_write_text(path, format_rttm_lines(segments))


# ==================== TRANSCRIPTS ====================

_UTT_ID = re.compile(r"^(?P<rec>.+)_(?P<start>\d{7})_(?P<end>\d{7})$")


def make_utt_id(recording_id: str, start: float, end: float) -> str:
    """Utterance id carrying its interval in centiseconds"""
    return f"{recording_id}_{int(round(start * 100)):07d}_{int(round(end * 100)):07d}"


def parse_utt_id(utt_id: str) -> Optional[Tuple[str, float, float]]:
    match = _UTT_ID.match(utt_id)
    if match is None:
        return None
    return match["rec"], int(match["start"]) / 100.0, int(match["end"]) / 100.0


def read_transcripts(path: PathLike) -> Dict[str, List[str]]:
    """Read `<utt_id> <token...>` lines; tokens are case-folded"""
    transcripts: Dict[str, List[str]] = {}
    for number, fields in _lines(path):
        if fields[0] in transcripts:
            raise FormatError(f"duplicate utterance id {fields[0]}", path=path, line=number)
        transcripts[fields[0]] = [token.casefold() for token in fields[1:]]
    return transcripts


def write_transcripts(path: PathLike, transcripts: Dict[str, Sequence[str]]) -> Path:
    text = "".join(
        " ".join([utt, *transcripts[utt]]) + "\n" for utt in sorted(transcripts)
    )
    return atomic_write_text(path, text)


# ==================== LISTS / TSV ====================

def read_id_list(path: PathLike) -> List[str]:
    return [fields[0] for _, fields in _lines(path)]


def write_id_list(path: PathLike, ids: Sequence[str]) -> Path:
    return atomic_write_text(path, "".join(f"{rec}\n" for rec in ids))


def read_hyp_segments(path: PathLike) -> List[HypSegment]:
    """Read `rec start end kind confidence [transcript...]` lines"""
    out: List[HypSegment] = []
    for number, fields in _lines(path):
        if len(fields) < 5:
            raise FormatError(f"expected at least 5 fields, got {len(fields)}", path=path, line=number)
        start = _float(fields[1], path, number, "start")
        end = _float(fields[2], path, number, "end")
        confidence = _float(fields[4], path, number, "confidence")
        try:
            out.append(HypSegment(
                recording_id=fields[0], start=start, end=end, kind=fields[3],
                confidence=confidence,
                transcript=tuple(fields[5:]) if len(fields) > 5 else None,
            ))
        except InvalidSegmentError as e:
            raise FormatError(str(e), path=path, line=number) from None
    return out


def write_hyp_segments(path: PathLike, segments: Sequence[HypSegment]) -> Path:
    lines = []
    for seg in segments:
        fields = [seg.recording_id, format_time(seg.start), format_time(seg.end),
                  seg.kind, f"{seg.confidence:.4f}", *(seg.transcript or ())]
        lines.append("\t".join(fields))
    return atomic_write_text(path, "".join(line + "\n" for line in lines))


def write_manifest(path: PathLike, lines: Sequence[str]) -> Path:
    return atomic_write_text(path, "".join(line + "\n" for line in lines))


# ==================== BINARY HELPERS ====================

class _Reader:
    """Sequential little-endian reader over a byte buffer with format errors on underrun"""

    def __init__(self, data: bytes, path: PathLike):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(f"truncated file at byte {self.offset}", path=self.path)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count), dtype=dtype).astype(np.float64)

    def header(self, magic: bytes) -> None:
        found, version = self.unpack("<4sI")
        if found != magic:
            raise FormatError(f"bad magic {found!r}, expected {magic!r}", path=self.path)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported version {version}", path=self.path)

    def finish(self) -> None:
        if self.offset != len(self.data):
            raise FormatError(f"{len(self.data) - self.offset} trailing bytes", path=self.path)


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FormatError("file not found", path=path)
    return path.read_bytes()


def _f32(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f4").tobytes()


def _f64(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f8").tobytes()


# ==================== FEAT ====================

def write_features(path: PathLike, feats: FeatureMatrix) -> Path:
    rows = np.asarray(feats.rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[:, None]
    header = struct.pack("<4sIIId", b"FEAT", FORMAT_VERSION, rows.shape[0], rows.shape[1],
                         float(feats.frame_rate))
    return atomic_write_bytes(path, header + _f32(rows))


def read_features(path: PathLike, recording_id: Optional[str] = None) -> FeatureMatrix:
    reader = _Reader(_read_bytes(path), path)
    reader.header(b"FEAT")
    n_rows, n_cols, frame_rate = reader.unpack("<IId")
    rows = reader.array("<f4", n_rows * n_cols).reshape(n_rows, n_cols)
    reader.finish()
    return FeatureMatrix(rows=rows, frame_rate=frame_rate,
                         recording_id=recording_id or Path(path).stem)


# ==================== SADM ====================

def write_sadm(path: PathLike, layers: Sequence[Tuple[np.ndarray, np.ndarray]],
               input_mean: np.ndarray, input_std: np.ndarray) -> Path:
    """magic, version, layer count, per-layer (in, out) dims, then W, b per layer, then input mean/std"""
    parts = [struct.pack("<4sII", b"SADM", FORMAT_VERSION, len(layers))]
    parts += [struct.pack("<II", *weights.shape) for weights, _ in layers]
    for weights, bias in layers:
        parts += [_f32(weights), _f32(bias)]
    parts += [_f32(input_mean), _f32(input_std)]
    return atomic_write_bytes(path, b"".join(parts))


def read_sadm(path: PathLike) -> Tuple[List[Tuple[np.ndarray, np.ndarray]], np.ndarray, np.ndarray]:
    reader = _Reader(_read_bytes(path), path)
    reader.header(b"SADM")
    (n_layers,) = reader.unpack("<I")
    dims = [reader.unpack("<II") for _ in range(n_layers)]
    for (_, n_out), (n_in, _) in zip(dims, dims[1:]):
        if n_out != n_in:
            raise FormatError("layer dimensions do not chain", path=path)
    layers = []
    for n_in, n_out in dims:
        weights = reader.array("<f4", n_in * n_out).reshape(n_in, n_out)
        bias = reader.array("<f4", n_out)
        layers.append((weights, bias))
    input_dim = dims[0][0] if dims else 0
    input_mean = reader.array("<f4", input_dim)
    input_std = reader.array("<f4", input_dim)
    reader.finish()
    return layers, input_mean, input_std


# ==================== PLDA ====================

def write_plda(path: PathLike, mu: np.ndarray, between: np.ndarray, within: np.ndarray) -> Path:
    header = struct.pack("<4sII", b"PLDA", FORMAT_VERSION, len(mu))
    return atomic_write_bytes(path, header + _f64(mu) + _f64(between) + _f64(within))


def read_plda(path: PathLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    reader = _Reader(_read_bytes(path), path)
    reader.header(b"PLDA")
    (dim,) = reader.unpack("<I")
    mu = reader.array("<f8", dim)
    between = reader.array("<f8", dim * dim).reshape(dim, dim)
    within = reader.array("<f8", dim * dim).reshape(dim, dim)
    reader.finish()
    return mu, between, within


# ==================== WHTN ====================

def write_whitener(path: PathLike, mean: np.ndarray, transform: np.ndarray) -> Path:
    header = struct.pack("<4sIII", b"WHTN", FORMAT_VERSION, transform.shape[1], transform.shape[0])
    return atomic_write_bytes(path, header + _f64(mean) + _f64(transform))


def read_whitener(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    reader = _Reader(_read_bytes(path), path)
    reader.header(b"WHTN")
    in_dim, out_dim = reader.unpack("<II")
    mean = reader.array("<f8", in_dim)
    transform = reader.array("<f8", out_dim * in_dim).reshape(out_dim, in_dim)
    reader.finish()
    return mean, transform


# ==================== EMBV ====================

def write_embv(path: PathLike, rows: Sequence[EmbeddingRow], dim: int) -> Path:
    parts = [struct.pack("<4sIIQ", b"EMBV", FORMAT_VERSION, dim, len(rows))]
    for rec, start, end, vector in rows:
        encoded = rec.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded + struct.pack("<dd", start, end))
        parts.append(_f32(vector))
    return atomic_write_bytes(path, b"".join(parts))


def write_embedding_text(path: PathLike, rows: Sequence[EmbeddingRow]) -> Path:
    lines = []
    for rec, start, end, vector in rows:
        values = " ".join(f"{v:.6g}" for v in vector)
        lines.append(f"{rec} {start:.3f} {end:.3f} {values}")
    return atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_embedding_rows(path: PathLike) -> Tuple[List[EmbeddingRow], int]:
    """
    Read an EMBV binary file or its text variant (`rec start end v1 v2 ...`)

    Returns:
        (rows, dim); an empty text file gives ([], 0)
    """
    data = _read_bytes(path)
    if data[:4] == b"EMBV":
        return _read_embv(data, path)

    rows: List[EmbeddingRow] = []
    dim = None
    for number, fields in _lines(path):
        if len(fields) < 4:
            raise FormatError("expected rec, start, end and at least one value", path=path, line=number)
        start = _float(fields[1], path, number, "start")
        end = _float(fields[2], path, number, "end")
        vector = np.array([_float(v, path, number, "vector value") for v in fields[3:]])
        if dim is None:
            dim = len(vector)
        elif len(vector) != dim:
            raise FormatError(f"dimension {len(vector)} differs from {dim}", path=path, line=number)
        rows.append((fields[0], start, end, vector))
    return rows, dim or 0


def _read_embv(data: bytes, path: PathLike) -> Tuple[List[EmbeddingRow], int]:
    reader = _Reader(data, path)
    reader.header(b"EMBV")
    dim, count = reader.unpack("<IQ")
    rows: List[EmbeddingRow] = []
    for _ in range(count):
        (length,) = reader.unpack("<I")
        try:
            rec = reader.take(length).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"recording id is not UTF-8: {e}", path=path) from None
        start, end = reader.unpack("<dd")
        rows.append((rec, start, end, reader.array("<f4", dim)))
    reader.finish()
    return rows, dim
