"""
Speaker diarization back end
Two-covariance PLDA (EM training, closed-form pair scoring), per-recording PCA projection,
threshold-stopped average-linkage AHC and VB-HMM resegmentation of chunk labels
"""

import itertools
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.linalg import eigh, solve
from scipy.special import logsumexp, softmax
from sklearn.decomposition import PCA
from sklearn.metrics.pairwise import cosine_similarity

import config
from src import data_loader
from src.embeddings import Chunk, EmbeddingSet, WhitenModel
from src.errors import (CoverageError, DegenerateDataError, InvalidInitError, NumericalError, RankError,
                        ShapeError, UsageError)
from src.metrics import der_corpus
from src.utils import LabeledSegment

logger = structlog.get_logger(__name__)

LOG_2PI = float(np.log(2 * np.pi))

# Chunk boundary comparisons when mapping labels to time
_EPS = 1e-9


# ==================== TYPES ====================

def _floor_psd(matrix: np.ndarray, floor: float) -> np.ndarray:
    """Symmetrize and clip eigenvalues from below"""
    matrix = (matrix + matrix.T) / 2
    eigvals, eigvecs = eigh(matrix)
    return (eigvecs * np.maximum(eigvals, floor)) @ eigvecs.T


@dataclass(frozen=True, eq=False)
class PldaModel:
    """x = mu + y + e with y ~ N(0, between), e ~ N(0, within)"""
    mu: np.ndarray
    between: np.ndarray
    within: np.ndarray

    def __post_init__(self):
        dim = self.mu.shape[0]
        if self.between.shape != (dim, dim) or self.within.shape != (dim, dim):
            raise ShapeError(f"PLDA covariances must be {dim}x{dim}")

    @property
    def dim(self) -> int:
        return int(self.mu.shape[0])

    def project(self, projection: np.ndarray) -> "PldaModel":
        """Model induced by v -> P v for a (k x dim) projection"""
        return PldaModel(mu=projection @ self.mu,
                         between=projection @ self.between @ projection.T,
                         within=projection @ self.within @ projection.T)

    def save(self, path: Union[str, Path]) -> Path:
        return data_loader.write_plda(path, self.mu, self.between, self.within)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PldaModel":
        mu, between, within = data_loader.read_plda(path)
        return cls(mu=mu, between=between, within=within)


class AhcConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    stop_threshold: float = config.AHC_DEFAULTS['stop_threshold']
    pca_components: int = Field(default=config.AHC_DEFAULTS['pca_components'], ge=1)
    linkage: Literal['average'] = config.AHC_DEFAULTS['linkage']
    scoring: Literal['plda', 'cosine'] = config.AHC_DEFAULTS['scoring']


class VbConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    loop_prob: float = Field(default=config.VB_DEFAULTS['loop_prob'], gt=0.0, lt=1.0)
    max_iters: int = Field(default=config.VB_DEFAULTS['max_iters'], ge=1)
    acoustic_scale: float = Field(default=config.VB_DEFAULTS['acoustic_scale'], gt=0.0)
    min_occupancy: float = Field(default=config.VB_DEFAULTS['min_occupancy'], ge=0.0, lt=1.0)
    convergence_tol: float = Field(default=config.VB_DEFAULTS['convergence_tol'], ge=0.0)
    speaker_regularization: float = Field(default=config.VB_DEFAULTS['speaker_regularization'], gt=0.0)
    init_smoothing: float = Field(default=config.VB_DEFAULTS['init_smoothing'], ge=0.0)
    update_priors: bool = config.VB_DEFAULTS['update_priors']
    reference_dim: int = Field(default=config.VB_DEFAULTS['reference_dim'], ge=0)

    def acoustic_scale_for(self, dim: int) -> float:
        """acoustic_scale rescaled from reference_dim to dim, never above 1"""
        if self.reference_dim == 0:
            return self.acoustic_scale
        return min(1.0, self.acoustic_scale * self.reference_dim / max(dim, 1))


class AhcTuningGrid(BaseModel):
    stop_threshold: List[float] = Field(default_factory=lambda: list(config.AHC_TUNING_GRID['stop_threshold']))
    pca_components: List[int] = Field(default_factory=lambda: list(config.AHC_TUNING_GRID['pca_components']))

    @field_validator('stop_threshold', 'pca_components', mode='before')
    @classmethod
    def _split_csv(cls, value):
        if isinstance(value, str):
            return [v for v in value.split(',') if v.strip()]
        return value

    @field_validator('stop_threshold', 'pca_components')
    @classmethod
    def _non_empty(cls, value):
        if not value:
            raise ValueError("grid values must not be empty")
        return value

    def configs(self, base: Optional[AhcConfig] = None) -> List[AhcConfig]:
        """Grid points in tie-break order: lower threshold, then fewer components"""
        base = base or AhcConfig()
        return [base.model_copy(update={'stop_threshold': t, 'pca_components': k})
                for t, k in itertools.product(sorted(set(self.stop_threshold)), sorted(set(self.pca_components)))]


@dataclass(frozen=True, eq=False)
class Clustering:
    labels: np.ndarray
    num_speakers: int
    recording_id: str = ""

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.size and (labels.min() < 0 or set(np.unique(labels)) != set(range(self.num_speakers))):
            raise ShapeError(f"{self.recording_id}: labels are not dense in [0, {self.num_speakers})")


def dense_relabel(labels: Sequence[int]) -> np.ndarray:
    """Renumber by order of first appearance"""
    mapping: Dict[int, int] = {}
    return np.array([mapping.setdefault(int(label), len(mapping)) for label in labels], dtype=int)


# ==================== PLDA ====================

def _speaker_groups(vectors: np.ndarray, labels: Sequence[str]) -> Tuple[np.ndarray, List[str]]:
    """Drop speakers with fewer than two vectors; returns (row mask, kept speakers)"""
    counts = Counter(labels)
    dropped = sorted(spk for spk, n in counts.items() if n < 2)
    if dropped:
        logger.info("plda_speakers_dropped", count=len(dropped), reason="fewer than two vectors")
    kept = sorted(spk for spk, n in counts.items() if n >= 2)
    if len(kept) < 2:
        raise DegenerateDataError(f"PLDA needs at least two speakers with two vectors each, got {len(kept)}")
    keep = set(kept)
    return np.array([label in keep for label in labels], dtype=bool), kept


class _SpeakerStats:
    """Per-speaker sufficient statistics around the global mean"""

    def __init__(self, vectors: np.ndarray, labels: Sequence[str], speakers: Sequence[str], mu: np.ndarray):
        index = {spk: i for i, spk in enumerate(speakers)}
        ids = np.array([index[label] for label in labels])
        centred = vectors - mu
        self.n_vectors, self.dim = centred.shape
        self.counts = np.bincount(ids, minlength=len(speakers)).astype(float)
        self.sums = np.zeros((len(speakers), self.dim))
        np.add.at(self.sums, ids, centred)
        self.means = self.sums / self.counts[:, None]
        self.scatter = centred.T @ centred
        deviations = centred - self.means[ids]
        self.within_scatter = deviations.T @ deviations
        by_count: Dict[int, List[int]] = defaultdict(list)
        for spk, n in enumerate(self.counts.astype(int)):
            by_count[n].append(spk)
        # speakers grouped by vector count share one posterior gain
        self.groups = {n: np.array(idx) for n, idx in sorted(by_count.items())}


def _plda_log_likelihood(stats: _SpeakerStats, between: np.ndarray, within: np.ndarray) -> float:
    """Exact marginal log-likelihood of all vectors under the two-covariance model"""
    sign_w, logdet_w = np.linalg.slogdet(within)
    if sign_w <= 0:
        raise NumericalError("within-speaker covariance is not positive definite")
    dim = stats.dim
    total = -0.5 * np.trace(solve(within, stats.within_scatter, assume_a='pos'))
    for n, idx in stats.groups.items():
        marginal = between + within / n
        sign, logdet = np.linalg.slogdet(marginal)
        if sign <= 0:
            raise NumericalError("speaker-mean covariance is not positive definite")
        means = stats.means[idx]
        maha = np.sum(means * solve(marginal, means.T, assume_a='pos').T, axis=1)
        per_speaker = (-0.5 * (dim * LOG_2PI + logdet) - 0.5 * maha
                       - 0.5 * dim * np.log(n) - 0.5 * (n - 1) * (dim * LOG_2PI + logdet_w))
        total += float(per_speaker.sum())
    return float(total)


def plda_em(
    vectors: np.ndarray,
    labels: Sequence[str],
    max_iters: int = config.PLDA_MAX_ITERS,
    tol: float = config.PLDA_TOL,
) -> Tuple[PldaModel, List[float]]:
    """
    Fit the two-covariance model by expectation-maximization

    mu is the global mean. Between and within covariances start from the moment
    estimates and are refined until the per-vector log-likelihood improves by less
    than `tol`. Covariances are eigen-floored relative to the data variance.

    Args:
        vectors: (n, dim) training vectors
        labels: Speaker label per vector
        max_iters: EM iteration cap
        tol: Per-vector log-likelihood improvement treated as converged

    Returns:
        (model, per-vector log-likelihood after initialisation and after every iteration)
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or len(vectors) != len(labels):
        raise ShapeError("vectors must be (n, dim) with one label per row")
    keep, speakers = _speaker_groups(vectors, list(labels))
    vectors = vectors[keep]
    labels = [label for label, k in zip(labels, keep) if k]

    mu = vectors.mean(axis=0)
    stats = _SpeakerStats(vectors, labels, speakers, mu)
    n_vectors, dim = stats.n_vectors, stats.dim
    n_speakers = len(speakers)

    scale = np.trace(stats.scatter) / (n_vectors * dim)
    if scale <= 0:
        raise DegenerateDataError("PLDA training vectors have no variance")
    floor = config.PLDA_COV_FLOOR * scale

    between = _floor_psd(stats.means.T @ stats.means / n_speakers, floor)
    within = _floor_psd(stats.within_scatter / n_vectors, floor)

    trace = [_plda_log_likelihood(stats, between, within) / n_vectors]
    for _ in range(max_iters):
        between_acc = np.zeros((dim, dim))
        within_acc = stats.scatter.copy()
        for n, idx in stats.groups.items():
            # posterior of y: mean B (B + W/n)^-1 xbar, cov B - B (B + W/n)^-1 B
            gain = solve(between + within / n, between, assume_a='pos')
            post_cov = between - between @ gain
            post_cov = (post_cov + post_cov.T) / 2
            post_means = stats.means[idx] @ gain
            second = len(idx) * post_cov + post_means.T @ post_means
            between_acc += second
            cross = stats.sums[idx].T @ post_means
            within_acc += n * second - cross - cross.T
        between = _floor_psd(between_acc / n_speakers, floor)
        within = _floor_psd(within_acc / n_vectors, floor)
        trace.append(_plda_log_likelihood(stats, between, within) / n_vectors)
        if trace[-1] - trace[-2] < tol:
            break

    logger.info("plda_trained", speakers=n_speakers, vectors=n_vectors, dim=dim,
                iterations=len(trace) - 1, log_likelihood=round(trace[-1], 6))
    return PldaModel(mu=mu, between=between, within=within), trace


def plda_fit(embeddings: EmbeddingSet, max_iters: int = config.PLDA_MAX_ITERS,
             tol: float = config.PLDA_TOL) -> PldaModel:
    """PLDA from a speaker-labeled embedding set"""
    keys, vectors = embeddings.matrix()
    model, _ = plda_em(vectors, embeddings.labels(keys), max_iters, tol)
    return model


def plda_score_matrix(model: PldaModel, vectors: np.ndarray) -> np.ndarray:
    """
    Same-vs-different speaker log-likelihood ratios for all pairs

    Same speaker: [x1; x2] ~ N([mu; mu], [[T, B], [B, T]]) with T = B + W.
    Different speakers: x1, x2 independent N(mu, T).
    """
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if vectors.shape[1] != model.dim:
        raise ShapeError(f"vectors of dim {vectors.shape[1]}, PLDA model has {model.dim}")
    dim = model.dim
    total = model.between + model.within
    joint = np.block([[total, model.between], [model.between, total]])

    sign_t, logdet_t = np.linalg.slogdet(total)
    sign_j, logdet_j = np.linalg.slogdet(joint)
    if sign_t <= 0 or sign_j <= 0:
        raise NumericalError("PLDA total or same-speaker covariance is singular")

    joint_inv = np.linalg.inv(joint)
    quad = np.linalg.inv(total) - joint_inv[:dim, :dim]
    cross = -joint_inv[:dim, dim:]
    quad = (quad + quad.T) / 2
    cross = (cross + cross.T) / 2

    centred = vectors - model.mu
    self_terms = np.sum((centred @ quad) * centred, axis=1)
    scores = 0.5 * self_terms[:, None] + 0.5 * self_terms[None, :] + centred @ cross @ centred.T
    scores += logdet_t - 0.5 * logdet_j
    return (scores + scores.T) / 2


def plda_score_pair(model: PldaModel, x1: np.ndarray, x2: np.ndarray) -> float:
    if np.shape(x1) != np.shape(x2):
        raise ShapeError(f"vector shapes differ: {np.shape(x1)} vs {np.shape(x2)}")
    return float(plda_score_matrix(model, np.vstack([x1, x2]))[0, 1])


def cosine_score_matrix(vectors: np.ndarray) -> np.ndarray:
    """Cosine similarity backend, no PLDA model involved"""
    return cosine_similarity(np.atleast_2d(vectors))


# ==================== PCA ====================

def recording_pca_project(model: PldaModel, vectors: np.ndarray, k: int) -> Tuple[np.ndarray, PldaModel]:
    """
    Fit PCA on one recording's vectors and project both the vectors and the PLDA model

    Args:
        model: PLDA model in the input space
        vectors: (n_chunks, dim) vectors of one recording
        k: Number of components, 1 <= k <= min(dim, n_chunks - 1)

    Returns:
        (n_chunks x k projected vectors, projected model)
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    n, dim = vectors.shape
    if dim != model.dim:
        raise ShapeError(f"vectors of dim {dim}, PLDA model has {model.dim}")
    if not 1 <= k <= min(dim, n - 1):
        raise RankError(f"{k} PCA components need 1 <= k <= min({dim}, {n - 1})")
    if np.ptp(vectors, axis=0).max() == 0:
        raise RankError("recording vectors have no variance")

    pca = PCA(n_components=k, svd_solver='full').fit(vectors)
    if pca.explained_variance_[k - 1] <= 1e-10 * pca.explained_variance_[0]:
        raise RankError(f"recording vectors span fewer than {k} dimensions")
    projection = pca.components_
    return vectors @ projection.T, model.project(projection)


# ==================== AHC ====================

def ahc_cluster(scores: np.ndarray, cfg: Optional[AhcConfig] = None, recording_id: str = "") -> Clustering:
    """
    Average-linkage agglomerative clustering on a similarity matrix

    Each step merges the active cluster pair with the highest mean pairwise score,
    lowest (i, j) representative pair first on ties, until that score falls below
    the stop threshold. A cluster is represented by its lowest member index.

    Args:
        scores: Symmetric finite (n x n) scores
        cfg: AhcConfig (stop_threshold is used)
        recording_id: Stamped on the result

    Returns:
        Clustering labeled in order of representatives
    """
    cfg = cfg or AhcConfig()
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if n == 0:
        return Clustering(np.zeros(0, dtype=int), 0, recording_id)
    if scores.shape != (n, n) or not np.allclose(scores, scores.T, atol=1e-9):
        raise ShapeError("scores must be a symmetric square matrix")
    if not np.all(np.isfinite(scores)):
        raise NumericalError("scores contain non-finite values")

    sums = scores.copy()
    sizes = np.ones(n)
    active = np.ones(n, dtype=bool)
    assignment = np.arange(n)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)

    while active.sum() > 1:
        pairs = upper & np.outer(active, active)
        averages = np.where(pairs, sums / np.outer(sizes, sizes), -np.inf)
        best = averages.max()
        if best < cfg.stop_threshold:
            break
        i, j = np.argwhere(averages == best)[0]
        sums[i, :] += sums[j, :]
        sums[:, i] += sums[:, j]
        sizes[i] += sizes[j]
        active[j] = False
        assignment[assignment == j] = i

    representatives = np.flatnonzero(active)
    index = {rep: label for label, rep in enumerate(representatives)}
    labels = np.array([index[rep] for rep in assignment], dtype=int)
    return Clustering(labels, len(representatives), recording_id)


# ==================== VB RESEGMENTATION ====================

def _forward_backward(log_lik: np.ndarray, transitions: np.ndarray,
                      initial: np.ndarray) -> Tuple[np.ndarray, float, np.ndarray, np.ndarray]:
    """State posteriors, total log-likelihood and the forward/backward log messages"""
    log_trans = np.log(transitions)
    n_frames = len(log_lik)
    forward = np.empty_like(log_lik)
    backward = np.zeros_like(log_lik)
    forward[0] = log_lik[0] + np.log(initial)
    for t in range(1, n_frames):
        forward[t] = log_lik[t] + logsumexp(forward[t - 1] + log_trans.T, axis=1)
    for t in range(n_frames - 2, -1, -1):
        backward[t] = logsumexp(log_trans + log_lik[t + 1] + backward[t + 1], axis=1)
    total = float(logsumexp(forward[-1]))
    return np.exp(forward + backward - total), total, forward, backward


def vbx(vectors: np.ndarray, gamma: np.ndarray, phi: np.ndarray,
        cfg: Optional[VbConfig] = None) -> Tuple[np.ndarray, np.ndarray, List[float]]:
    """
    Variational Bayes HMM over speaker states

    Vectors live in a space where the within-speaker covariance is identity and the
    between-speaker covariance is diag(phi). Each speaker has a latent y ~ N(0, I) with
    emission N(sqrt(phi) * y, I); acoustic terms are scaled by
    cfg.acoustic_scale_for(d) and the speaker prior by speaker_regularization.

    Transitions are loop_prob * I + (1 - loop_prob) * priors: the switch mass is spread
    over all speakers including the current one, so the effective self-transition is
    loop_prob + (1 - loop_prob) * prior (loop_prob + (1 - loop_prob) / S with uniform
    priors).

    Args:
        vectors: (n, d) vectors in time order
        gamma: (n, S) initial responsibilities
        phi: (d,) between-speaker variances
        cfg: VbConfig

    Returns:
        (responsibilities, speaker priors, ELBO per iteration)
    """
    cfg = cfg or VbConfig()
    n, dim = vectors.shape
    n_speakers = gamma.shape[1]
    fa, fb = cfg.acoustic_scale_for(dim), cfg.speaker_regularization
    priors = np.full(n_speakers, 1.0 / n_speakers)

    frame_const = -0.5 * (np.sum(vectors ** 2, axis=1, keepdims=True) + dim * LOG_2PI)
    rho = vectors * np.sqrt(phi)
    elbo: List[float] = []
    for _ in range(cfg.max_iters):
        inv_precision = 1.0 / (1.0 + fa / fb * gamma.sum(axis=0)[:, None] * phi)
        alpha = fa / fb * inv_precision * (gamma.T @ rho)
        log_lik = fa * (rho @ alpha.T - 0.5 * (inv_precision + alpha ** 2) @ phi + frame_const)

        transitions = np.eye(n_speakers) * cfg.loop_prob + (1.0 - cfg.loop_prob) * priors
        gamma, total, forward, backward = _forward_backward(log_lik, transitions, priors)
        elbo.append(total + fb * 0.5 * float(np.sum(np.log(inv_precision) - inv_precision - alpha ** 2 + 1)))

        if cfg.update_priors and n > 1:
            switches = np.exp(logsumexp(forward[:-1], axis=1, keepdims=True) + log_lik[1:] + backward[1:] - total)
            priors = gamma[0] + (1.0 - cfg.loop_prob) * priors * switches.sum(axis=0)
            priors = priors / priors.sum()

        if len(elbo) > 1 and elbo[-1] - elbo[-2] < cfg.convergence_tol:
            break
    return gamma, priors, elbo


def vb_space(model: PldaModel) -> Tuple[np.ndarray, np.ndarray]:
    """(transform, phi) with transform.T W transform = I and transform.T B transform = diag(phi)"""
    phi, transform = eigh(model.between, model.within)
    return transform, np.maximum(phi, 0.0)


def vb_resegment(vectors: np.ndarray, init: Clustering, model: PldaModel,
                 cfg: Optional[VbConfig] = None) -> Clustering:
    """
    Refine chunk labels with the VB-HMM, starting from a clustering

    Speakers whose total responsibility falls below min_occupancy * n_chunks are
    removed; remaining chunks take their argmax speaker, relabeled by first appearance.
    """
    cfg = cfg or VbConfig()
    vectors = np.asarray(vectors, dtype=np.float64)
    if init.num_speakers == 0 or len(init.labels) == 0:
        raise InvalidInitError(f"{init.recording_id}: VB needs an initial clustering with speakers")
    if len(init.labels) != len(vectors):
        raise ShapeError(f"{init.recording_id}: {len(init.labels)} labels for {len(vectors)} vectors")

    transform, phi = vb_space(model)
    projected = (vectors - model.mu) @ transform
    one_hot = np.zeros((len(vectors), init.num_speakers))
    one_hot[np.arange(len(vectors)), init.labels] = 1.0
    gamma, _, elbo = vbx(projected, softmax(one_hot * cfg.init_smoothing, axis=1), phi, cfg)

    occupancy = gamma.sum(axis=0)
    keep = np.flatnonzero(occupancy >= cfg.min_occupancy * len(vectors))
    if keep.size == 0:
        keep = np.array([int(np.argmax(occupancy))])
    labels = dense_relabel(keep[np.argmax(gamma[:, keep], axis=1)])
    num_speakers = int(labels.max()) + 1
    logger.debug("vb_resegmented", recording_id=init.recording_id, speakers_in=init.num_speakers,
                 speakers_out=num_speakers, iterations=len(elbo))
    return Clustering(labels, num_speakers, init.recording_id)


# ==================== RECORDING PIPELINE ====================

def speaker_name(label: int) -> str:
    return f"spk{label:02d}"


def labels_to_segments(chunks: Sequence[Chunk], labels: Sequence[int]) -> List[LabeledSegment]:
    """
    Chunk labels mapped to non-overlapping time segments

    Every elementary interval between chunk boundaries takes the majority label of the
    chunks covering it; ties go to the earliest-starting covering chunk. Touching
    intervals with the same label are merged.
    """
    pieces = [(s, e, i) for i, chunk in enumerate(chunks) for s, e in chunk.intervals]
    boundaries = sorted({t for s, e, _ in pieces for t in (s, e)})
    segments: List[LabeledSegment] = []
    for lo, hi in zip(boundaries, boundaries[1:]):
        if hi - lo <= _EPS:
            continue
        covering = [i for s, e, i in pieces if s <= lo + _EPS and e >= hi - _EPS]
        if not covering:
            continue
        votes = Counter(int(labels[i]) for i in covering)
        top = max(votes.values())
        tied = {label for label, count in votes.items() if count == top}
        winner = min((chunks[i].start, i) for i in covering if int(labels[i]) in tied)[1]
        name = speaker_name(int(labels[winner]))
        if segments and segments[-1].label == name and abs(segments[-1].end - lo) <= _EPS:
            segments[-1] = LabeledSegment(segments[-1].start, hi, name)
        else:
            segments.append(LabeledSegment(lo, hi, name))
    return segments


def cluster_recording(
    vectors: np.ndarray,
    plda: Optional[PldaModel],
    ahc_cfg: AhcConfig,
    vb_cfg: Optional[VbConfig] = None,
    recording_id: str = "",
) -> Clustering:
    """Per-recording PCA, pairwise scoring, AHC and optional VB on (already whitened) vectors"""
    n = len(vectors)
    if n == 0:
        return Clustering(np.zeros(0, dtype=int), 0, recording_id)
    if n == 1:
        return Clustering(np.zeros(1, dtype=int), 1, recording_id)

    if ahc_cfg.scoring == 'cosine' and vb_cfg is None:
        return ahc_cluster(cosine_score_matrix(vectors), ahc_cfg, recording_id)
    if plda is None:
        raise UsageError("PLDA scoring and VB resegmentation need a PLDA model")

    k = min(ahc_cfg.pca_components, vectors.shape[1], n - 1)
    try:
        projected, local_model = recording_pca_project(plda, vectors, k)
    except RankError as e:
        logger.warning("pca_degenerate", recording_id=recording_id, error=str(e), fallback="one speaker")
        return Clustering(np.zeros(n, dtype=int), 1, recording_id)

    if ahc_cfg.scoring == 'cosine':
        scores = cosine_score_matrix(vectors)
    else:
        scores = plda_score_matrix(local_model, projected)
    clustering = ahc_cluster(scores, ahc_cfg, recording_id)
    if vb_cfg is not None:
        clustering = vb_resegment(projected, clustering, local_model, vb_cfg)
    return clustering


def diarize_recording(
    chunks: Sequence[Chunk],
    vectors: np.ndarray,
    plda: Optional[PldaModel],
    ahc_cfg: Optional[AhcConfig] = None,
    vb_cfg: Optional[VbConfig] = None,
    whitener: Optional[WhitenModel] = None,
) -> List[LabeledSegment]:
    """
    Speaker-labeled segments for one recording

    Args:
        chunks: Time-ordered chunks of one recording
        vectors: One embedding row per chunk
        plda: PLDA model in the whitened space
        ahc_cfg: Threshold, PCA size and scoring backend
        vb_cfg: Enables VB resegmentation when given
        whitener: Applied to the vectors first when given

    Returns:
        Non-overlapping segments labeled spk00, spk01, ...
    """
    if not chunks:
        return []
    recordings = {chunk.recording_id for chunk in chunks}
    if len(recordings) != 1:
        raise UsageError(f"chunks from several recordings: {sorted(recordings)}")
    vectors = np.asarray(vectors, dtype=np.float64)
    if len(vectors) != len(chunks):
        raise ShapeError(f"{len(vectors)} vectors for {len(chunks)} chunks")
    if whitener is not None:
        vectors = whitener.apply(vectors)
    clustering = cluster_recording(vectors, plda, ahc_cfg or AhcConfig(), vb_cfg, chunks[0].recording_id)
    return labels_to_segments(chunks, clustering.labels)


def with_extra_components(cfg: AhcConfig, extra: int = config.UC_EXTRA_COMPONENTS) -> AhcConfig:
    """Under-clustering setting: more recording-dependent PCA components, same threshold"""
    return cfg.model_copy(update={'pca_components': cfg.pca_components + extra})


def variant_configs(variant: str, ahc_cfg: AhcConfig, vb_cfg: VbConfig,
                    extra: int = config.UC_EXTRA_COMPONENTS) -> Tuple[AhcConfig, Optional[VbConfig]]:
    """(AHC config, VB config or None) for a named system variant"""
    if variant == 'ahc':
        return ahc_cfg, None
    if variant == 'ahc_vb':
        return ahc_cfg, vb_cfg
    if variant == 'ahc_uc_vb':
        return with_extra_components(ahc_cfg, extra), vb_cfg
    raise UsageError(f"unknown diarization variant {variant!r}, expected one of {config.SD_VARIANTS}")


RecordingInput = Tuple[Sequence[Chunk], np.ndarray]


def diarize_corpus(
    inputs: Mapping[str, RecordingInput],
    plda: Optional[PldaModel],
    ahc_cfg: AhcConfig,
    vb_cfg: Optional[VbConfig] = None,
    workers: int = 1,
) -> Dict[str, List[LabeledSegment]]:
    """diarize_recording for every recording; inputs are already whitened"""
    recordings = sorted(inputs)

    def run(rec: str) -> List[LabeledSegment]:
        chunks, vectors = inputs[rec]
        return diarize_recording(chunks, vectors, plda, ahc_cfg, vb_cfg)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(run, recordings))
    else:
        results = [run(rec) for rec in recordings]
    return dict(zip(recordings, results))


def tune_diarization(
    inputs: Mapping[str, RecordingInput],
    refs: Mapping[str, Sequence[LabeledSegment]],
    plda: Optional[PldaModel],
    grid: Optional[AhcTuningGrid] = None,
    base: Optional[AhcConfig] = None,
    vb_cfg: Optional[VbConfig] = None,
    collar: float = config.METRICS_DEFAULTS['collar'],
    frame: float = config.METRICS_DEFAULTS['frame'],
    workers: int = 1,
) -> Tuple[AhcConfig, float]:
    """
    Grid search over (stop_threshold, pca_components) minimizing pooled DER

    Returns:
        (best config, its DER); ties go to the lower threshold, then fewer components
    """
    missing = sorted(set(inputs) - set(refs))
    if missing:
        raise CoverageError(f"no reference speakers for {', '.join(missing)}")
    candidates = (grid or AhcTuningGrid()).configs(base)

    def evaluate(cfg: AhcConfig) -> float:
        hyps = diarize_corpus(inputs, plda, cfg, vb_cfg)
        total, _ = der_corpus({rec: refs[rec] for rec in inputs}, hyps, collar, frame)
        return total.der

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            scores = list(executor.map(evaluate, candidates))
    else:
        scores = [evaluate(cfg) for cfg in candidates]

    best_index = 0
    for index, value in enumerate(scores):
        if value < scores[best_index]:
            best_index = index
    best = candidates[best_index]
    logger.info("ahc_tuned", points=len(candidates), der=round(scores[best_index], 6),
                stop_threshold=best.stop_threshold, pca_components=best.pca_components)
    return best, scores[best_index]


def speaker_counts(hyps: Mapping[str, Sequence[LabeledSegment]]) -> Dict[str, int]:
    return {rec: len({seg.label for seg in segments}) for rec, segments in sorted(hyps.items())}
