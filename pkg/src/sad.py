"""
Speech activity detection
MLP frame classifier (ReLU hidden layers, 2-way softmax), segment postprocessing
and exhaustive threshold tuning against DCF or DCF_INV
"""

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.special import log_softmax, softmax

import config
from src import data_loader
from src.errors import CoverageError, DegenerateDataError, ShapeError, UsageError
from src.frontend import FeatureMatrix
from src.metrics import SadErrorDurations, dcf, dcf_inv, pool_sad_stats, sad_error_durations
from src.utils import LabeledSegment, SPEECH

logger = structlog.get_logger(__name__)

Layer = Tuple[np.ndarray, np.ndarray]
Dataset = Sequence[Tuple[FeatureMatrix, np.ndarray]]

SPEECH_CLASS = 1
OBJECTIVES = {'dcf': dcf, 'dcf_inv': dcf_inv}


# ==================== TYPES ====================

@dataclass(frozen=True, eq=False)
class MlpParams:
    """
    Layer weights (in x out) and biases; the last layer has two outputs (non-speech, speech)

    input_mean / input_std normalize features before the first layer.
    losses holds the training loss trace (initial loss first) when produced by mlp_train.
    """

    layers: Tuple[Layer, ...]
    input_mean: Optional[np.ndarray] = None
    input_std: Optional[np.ndarray] = None
    losses: Tuple[float, ...] = ()

    hidden_activation = "relu"

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("an MLP needs at least one layer")
        for i, (weights, bias) in enumerate(self.layers):
            if weights.ndim != 2 or bias.shape != (weights.shape[1],):
                raise ShapeError(f"layer {i}: weight {weights.shape} and bias {bias.shape} do not match")
            if i > 0 and self.layers[i - 1][0].shape[1] != weights.shape[0]:
                raise ShapeError(f"layer {i} input {weights.shape[0]} does not chain "
                                 f"to layer {i - 1} output {self.layers[i - 1][0].shape[1]}")
        if self.layers[-1][0].shape[1] != 2:
            raise ShapeError("output layer must have 2 units")

    @property
    def input_dim(self) -> int:
        return int(self.layers[0][0].shape[0])

    @property
    def hidden_sizes(self) -> List[int]:
        return [int(weights.shape[1]) for weights, _ in self.layers[:-1]]

    def normalize(self, rows: np.ndarray) -> np.ndarray:
        if self.input_mean is None:
            return rows
        return (rows - self.input_mean) / self.input_std


@dataclass(frozen=True, eq=False)
class FramePosteriors:
    probs: np.ndarray
    frame_rate: float
    recording_id: str = ""

    def __post_init__(self):
        if self.frame_rate <= 0:
            raise UsageError("frame_rate must be positive")
        if self.probs.size and (np.nanmin(self.probs) < 0.0 or np.nanmax(self.probs) > 1.0
                                or np.isnan(self.probs).any()):
            raise ShapeError(f"{self.recording_id}: posteriors outside [0, 1]")

    @property
    def duration(self) -> float:
        return len(self.probs) / self.frame_rate


class SadPostConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    f_thd: float = Field(default=config.SAD_POST_DEFAULTS['f_thd'], ge=0.0, le=1.0)
    s_min: int = Field(default=config.SAD_POST_DEFAULTS['s_min'], ge=1)
    s_thd: float = Field(default=config.SAD_POST_DEFAULTS['s_thd'], ge=0.0, le=1.0)
    gap_merge: int = Field(default=config.SAD_POST_DEFAULTS['gap_merge'], ge=0)


class TrainConfig(BaseModel):
    learning_rate: float = Field(default=config.SAD_TRAIN_DEFAULTS['learning_rate'], gt=0)
    momentum: float = Field(default=config.SAD_TRAIN_DEFAULTS['momentum'], ge=0, lt=1)
    epochs: int = Field(default=config.SAD_TRAIN_DEFAULTS['epochs'], ge=1)
    batch_size: int = Field(default=config.SAD_TRAIN_DEFAULTS['batch_size'], ge=1)
    seed: int = config.DEFAULT_SEED
    normalize: bool = True


class TuningGrid(BaseModel):
    f_thd: List[float] = Field(default_factory=lambda: list(config.TUNING_GRID_DEFAULTS['f_thd']))
    s_min: List[int] = Field(default_factory=lambda: list(config.TUNING_GRID_DEFAULTS['s_min']))
    s_thd: List[float] = Field(default_factory=lambda: list(config.TUNING_GRID_DEFAULTS['s_thd']))
    gap_merge: List[int] = Field(default_factory=lambda: list(config.TUNING_GRID_DEFAULTS['gap_merge']))

    @field_validator('f_thd', 's_min', 's_thd', 'gap_merge', mode='before')
    @classmethod
    def _split_csv(cls, value):
        if isinstance(value, str):
            return [v for v in value.split(',') if v.strip()]
        return value

    @field_validator('f_thd', 's_min', 's_thd', 'gap_merge')
    @classmethod
    def _non_empty(cls, value):
        if not value:
            raise ValueError("grid values must not be empty")
        return value

    def configs(self) -> List[SadPostConfig]:
        """All grid points in tie-break order: lower f_thd, then s_thd, then s_min, then gap_merge"""
        points = itertools.product(sorted(set(self.f_thd)), sorted(set(self.s_thd)),
                                   sorted(set(self.s_min)), sorted(set(self.gap_merge)))
        return [SadPostConfig(f_thd=f, s_thd=st, s_min=sm, gap_merge=g) for f, st, sm, g in points]


def raw_config(f_thd: float) -> SadPostConfig:
    """Frame thresholding only: no length, score or gap filtering"""
    return SadPostConfig(f_thd=f_thd, s_min=1, s_thd=0.0, gap_merge=0)


# ==================== MLP ====================

def init_mlp(input_dim: int, hidden_sizes: Sequence[int], seed: int = config.DEFAULT_SEED) -> MlpParams:
    """He-initialised weights, zero biases"""
    rng = np.random.default_rng(seed)
    sizes = [input_dim, *hidden_sizes, 2]
    layers = []
    for n_in, n_out in zip(sizes, sizes[1:]):
        weights = rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
        layers.append((weights, np.zeros(n_out)))
    return MlpParams(layers=tuple(layers))


def _forward(layers: Sequence[Layer], rows: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
    """Returns (inputs to every layer, output logits)"""
    activations = [rows]
    hidden = rows
    for weights, bias in layers[:-1]:
        hidden = np.maximum(hidden @ weights + bias, 0.0)
        activations.append(hidden)
    weights, bias = layers[-1]
    return activations, hidden @ weights + bias


def mlp_forward(params: MlpParams, features: FeatureMatrix) -> FramePosteriors:
    """
    Per-frame speech probability

    Args:
        params: Trained network
        features: Frames x input_dim

    Returns:
        FramePosteriors with one softmax speech probability per frame
    """
    if features.rows.ndim != 2 or features.dim != params.input_dim:
        raise ShapeError(f"{features.recording_id}: feature dim {features.rows.shape[-1]} "
                         f"does not match network input {params.input_dim}")
    _, logits = _forward(params.layers, params.normalize(features.rows))
    probs = softmax(logits, axis=1)[:, SPEECH_CLASS]
    return FramePosteriors(probs=np.clip(probs, 0.0, 1.0), frame_rate=features.frame_rate,
                           recording_id=features.recording_id)


def _loss_and_grads(layers: Sequence[Layer], rows: np.ndarray, labels: np.ndarray,
                    with_grads: bool = True) -> Tuple[float, List[Layer]]:
    activations, logits = _forward(layers, rows)
    log_probs = log_softmax(logits, axis=1)
    n = rows.shape[0]
    loss = float(-log_probs[np.arange(n), labels].mean())
    if not with_grads:
        return loss, []

    delta = np.exp(log_probs)
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    grads: List[Layer] = []
    for index in range(len(layers) - 1, -1, -1):
        weights, _ = layers[index]
        inputs = activations[index]
        grads.append((inputs.T @ delta, delta.sum(axis=0)))
        if index > 0:
            delta = (delta @ weights.T) * (inputs > 0)
    grads.reverse()
    return loss, grads


def mlp_gradients(params: MlpParams, rows: np.ndarray, labels: np.ndarray) -> Tuple[float, List[Layer]]:
    """
    Mean cross-entropy and its analytic gradients w.r.t. every (W, b)

    Args:
        params: Network (its input normalization is applied and held fixed)
        rows: Frames x input_dim
        labels: 0 / 1 per frame

    Returns:
        (loss, [(dW, db) per layer])
    """
    return _loss_and_grads(params.layers, params.normalize(rows), np.asarray(labels, dtype=int))


def _stack_dataset(dataset: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    rows, labels = [], []
    for feats, flags in dataset:
        flags = np.asarray(flags)
        if len(flags) != feats.n_frames:
            raise ShapeError(f"{feats.recording_id}: {len(flags)} labels for {feats.n_frames} frames")
        rows.append(feats.rows)
        labels.append(flags.astype(int))
    if not rows:
        raise DegenerateDataError("empty SAD training set")
    return np.vstack(rows), np.concatenate(labels)


def cross_entropy(params: MlpParams, dataset: Dataset) -> float:
    rows, labels = _stack_dataset(dataset)
    loss, _ = _loss_and_grads(params.layers, params.normalize(rows), labels, with_grads=False)
    return loss


def frame_accuracy(params: MlpParams, dataset: Dataset) -> float:
    rows, labels = _stack_dataset(dataset)
    _, logits = _forward(params.layers, params.normalize(rows))
    return float((logits.argmax(axis=1) == labels).mean())


def mlp_train(dataset: Dataset, hidden_sizes: Sequence[int], hyper: Optional[TrainConfig] = None) -> MlpParams:
    """
    Mini-batch SGD with momentum on mean cross-entropy

    Args:
        dataset: (FeatureMatrix, per-frame speech flags) pairs
        hidden_sizes: Hidden layer widths, e.g. [256, 256]
        hyper: Optimizer settings; fixed seed gives identical parameters

    Returns:
        Trained MlpParams with the loss trace (initial loss, then one value per epoch)
    """
    hyper = hyper or TrainConfig()
    rows, labels = _stack_dataset(dataset)
    if len(np.unique(labels)) < 2:
        raise DegenerateDataError("SAD training data holds a single class")

    if hyper.normalize:
        mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        std[std < 1e-8] = 1.0
    else:
        mean = np.zeros(rows.shape[1])
        std = np.ones(rows.shape[1])
    normed = (rows - mean) / std

    layers = [(w.copy(), b.copy()) for w, b in init_mlp(rows.shape[1], hidden_sizes, hyper.seed).layers]
    velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in layers]
    shuffler = np.random.default_rng([hyper.seed, 1])

    losses = [_loss_and_grads(layers, normed, labels, with_grads=False)[0]]
    for epoch in range(hyper.epochs):
        order = shuffler.permutation(len(labels))
        for begin in range(0, len(order), hyper.batch_size):
            batch = order[begin:begin + hyper.batch_size]
            _, grads = _loss_and_grads(layers, normed[batch], labels[batch])
            for i, ((w, b), (vw, vb), (gw, gb)) in enumerate(zip(layers, velocity, grads)):
                vw = hyper.momentum * vw - hyper.learning_rate * gw
                vb = hyper.momentum * vb - hyper.learning_rate * gb
                velocity[i] = (vw, vb)
                layers[i] = (w + vw, b + vb)
        losses.append(_loss_and_grads(layers, normed, labels, with_grads=False)[0])
        logger.debug("sad_epoch", epoch=epoch + 1, loss=round(losses[-1], 6))

    logger.info("sad_trained", frames=len(labels), hidden=list(hidden_sizes),
                initial_loss=round(losses[0], 6), final_loss=round(losses[-1], 6))
    return MlpParams(layers=tuple(layers), input_mean=mean, input_std=std, losses=tuple(losses))


def save_mlp(path: Union[str, Path], params: MlpParams) -> Path:
    mean = params.input_mean if params.input_mean is not None else np.zeros(params.input_dim)
    std = params.input_std if params.input_std is not None else np.ones(params.input_dim)
    return data_loader.write_sadm(path, params.layers, mean, std)


def load_mlp(path: Union[str, Path]) -> MlpParams:
    layers, mean, std = data_loader.read_sadm(path)
    return MlpParams(layers=tuple(layers), input_mean=mean, input_std=std)


# ==================== POSTPROCESSING ====================

def _runs(flags: np.ndarray) -> List[Tuple[int, int]]:
    """[start, end) frame index pairs of consecutive True values"""
    edges = np.diff(np.concatenate([[0], flags.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(edges == 1).tolist(), np.flatnonzero(edges == -1).tolist()))


def postprocess(post: FramePosteriors, cfg: SadPostConfig) -> List[LabeledSegment]:
    """
    Threshold, merge short gaps, drop short segments, drop low-scoring segments

    Args:
        post: Per-frame speech probabilities
        cfg: f_thd / gap_merge / s_min / s_thd

    Returns:
        Speech segments with their mean frame probability as score
    """
    groups: List[List[int]] = []
    for start, end in _runs(post.probs >= cfg.f_thd):
        if groups and start - groups[-1][1] <= cfg.gap_merge:
            groups[-1][1] = end
        else:
            groups.append([start, end])

    segments = []
    for start, end in groups:
        if end - start < cfg.s_min:
            continue
        score = float(post.probs[start:end].mean())
        if score < cfg.s_thd:
            continue
        segments.append(LabeledSegment(start=start / post.frame_rate, end=end / post.frame_rate,
                                       label=SPEECH, score=score))
    return segments


# ==================== TUNING ====================

def evaluate_postprocess(
    posteriors: Mapping[str, FramePosteriors],
    refs: Mapping[str, Sequence[LabeledSegment]],
    cfg: SadPostConfig,
    durations: Optional[Mapping[str, float]] = None,
) -> List[SadErrorDurations]:
    """Per-recording error durations for one config, in sorted recording order"""
    out = []
    for rec in sorted(posteriors):
        post = posteriors[rec]
        file_dur = durations[rec] if durations is not None else post.duration
        out.append(sad_error_durations(refs[rec], postprocess(post, cfg), file_dur))
    return out


def tune_postprocess(
    posteriors: Mapping[str, FramePosteriors],
    refs: Mapping[str, Sequence[LabeledSegment]],
    objective: str = 'dcf',
    grid: Optional[TuningGrid] = None,
    durations: Optional[Mapping[str, float]] = None,
    pooling: str = config.METRICS_DEFAULTS['pooling'],
    workers: int = 1,
) -> Tuple[SadPostConfig, float]:
    """
    Exhaustive grid search for the postprocessing config minimizing the aggregate cost

    Args:
        posteriors: recording id -> frame posteriors
        refs: recording id -> reference segments (must cover every recording)
        objective: 'dcf' or 'dcf_inv'
        grid: Candidate values per parameter
        durations: File durations; defaults to the posterior stream length
        pooling: 'pooled' (duration sums) or 'mean' (average of per-file rates)
        workers: Grid points evaluated in parallel; result equals the serial one

    Returns:
        (best config, its cost); ties go to lower f_thd, then s_thd, then s_min
    """
    if objective not in OBJECTIVES:
        raise UsageError(f"unknown objective {objective!r}, expected one of {sorted(OBJECTIVES)}")
    missing = sorted(set(posteriors) - set(refs))
    if missing:
        raise CoverageError(f"no reference segments for {', '.join(missing)}")
    cost_fn = OBJECTIVES[objective]
    candidates = (grid or TuningGrid()).configs()

    def evaluate(cfg: SadPostConfig) -> float:
        return cost_fn(pool_sad_stats(evaluate_postprocess(posteriors, refs, cfg, durations), pooling))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            costs = list(executor.map(evaluate, candidates))
    else:
        costs = [evaluate(cfg) for cfg in candidates]

    best_index = 0
    for index, cost in enumerate(costs):
        if cost < costs[best_index]:
            best_index = index

    logger.info("sad_tuned", objective=objective, points=len(candidates),
                cost=round(costs[best_index], 6), **candidates[best_index].model_dump())
    return candidates[best_index], costs[best_index]
