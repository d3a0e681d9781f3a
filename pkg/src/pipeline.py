"""
Corpus-level orchestration
Fans recordings out over a worker pool and chains frontend, SAD, embeddings and
diarization into the training, inference, tuning and experiment flows
"""

import concurrent.futures
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, TypeVar

import numpy as np
import pandas as pd
import structlog

import config
from src import data_loader, diarization, embeddings, sad
from src.diarization import AhcConfig, PldaModel
from src.embeddings import Chunk, EmbeddingSet, WhitenModel
from src.errors import CoverageError, EmptyChunkError, UsageError
from src.frontend import FeatureMatrix, FrameSpec, compute_mfcc, frame_labels, read_wav, stack_context
from src.metrics import (DerBreakdown, dcf, dcf_inv, der_corpus, pool_sad_stats, sad_error_durations,
                         segmentation_transcripts, speaker_count_report, wer_corpus)
from src.sad import FramePosteriors, MlpParams, SadPostConfig
from src.settings import PipelineConfig
from src.utils import LabeledSegment, SPEECH

logger = structlog.get_logger(__name__)

T = TypeVar("T")
Segments = Dict[str, List[LabeledSegment]]
SAD_SCORE_COLUMNS = ['output', 'p_miss', 'p_fa', 'dcf', 'dcf_inv']


# ==================== CORPUS ====================

@dataclass
class Corpus:
    audio: Dict[str, Path]
    sad_refs: Optional[Segments] = None
    speaker_refs: Optional[Segments] = None
    transcripts: Optional[Dict[str, List[str]]] = None
    train_ids: List[str] = field(default_factory=list)
    dev_ids: List[str] = field(default_factory=list)

    @property
    def recordings(self) -> List[str]:
        return sorted(self.audio)

    def require(self, what: str) -> Segments:
        refs = self.sad_refs if what == 'sad' else self.speaker_refs
        if refs is None:
            raise UsageError(f"this command needs {'SAD labels' if what == 'sad' else 'reference RTTM'}")
        return refs


def load_corpus(cfg: PipelineConfig) -> Corpus:
    """Audio files plus whichever references and id lists the configuration points at"""
    paths = cfg.paths
    if paths.audio is None:
        raise UsageError("no audio directory configured (PATHS__CORPUS_DIR or PATHS__AUDIO_DIR)")
    audio = {p.stem: p for p in sorted(paths.audio.glob("*.wav"))}
    if not audio:
        raise UsageError(f"no .wav files in {paths.audio}")

    corpus = Corpus(audio=audio)
    if paths.sad_reference is not None:
        corpus.sad_refs = data_loader.read_label_file(paths.sad_reference)
    if paths.rttm_reference is not None:
        corpus.speaker_refs = data_loader.read_rttm(paths.rttm_reference)
    if paths.transcript_file is not None:
        corpus.transcripts = data_loader.read_transcripts(paths.transcript_file)

    recordings = corpus.recordings
    corpus.train_ids = _id_list(paths.train_ids, recordings, "train")
    corpus.dev_ids = _id_list(paths.dev_ids, recordings, "dev")
    logger.info("corpus_loaded", recordings=len(recordings), train=len(corpus.train_ids),
                dev=len(corpus.dev_ids))
    return corpus


def _id_list(path: Optional[Path], recordings: Sequence[str], name: str) -> List[str]:
    if path is None:
        logger.warning("id_list_missing", split=name, fallback="all recordings")
        return list(recordings)
    ids = data_loader.read_id_list(path)
    unknown = sorted(set(ids) - set(recordings))
    if unknown:
        raise CoverageError(f"{name} list names recordings without audio: {', '.join(unknown[:5])}")
    return ids


def fan_out(items: Iterable[str], worker: Callable[[str], T], workers: int = 1) -> Dict[str, T]:
    """Run worker(item) for every recording id; results keyed and sorted by id"""
    items = sorted(set(items))
    results: Dict[str, T] = {}
    if workers <= 1:
        for item in items:
            results[item] = worker(item)
        return results
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {executor.submit(worker, item): item for item in items}
        for future in concurrent.futures.as_completed(futures):
            results[futures[future]] = future.result()
    return {item: results[item] for item in items}


# ==================== SAD ====================

def sad_features(path: Path, spec: FrameSpec, context: int) -> FeatureMatrix:
    return stack_context(compute_mfcc(read_wav(path), spec), context)


def audio_durations(corpus: Corpus, recordings: Iterable[str], workers: int = 1) -> Dict[str, float]:
    return fan_out(recordings, lambda rec: read_wav(corpus.audio[rec]).duration, workers)


def train_sad(corpus: Corpus, cfg: PipelineConfig, workers: int = 1) -> MlpParams:
    """Frame classifier trained on the train recordings' reference labels"""
    refs = corpus.require('sad')
    missing = sorted(set(corpus.train_ids) - set(refs))
    if missing:
        raise CoverageError(f"no SAD labels for training recordings {', '.join(missing[:5])}")

    def prepare(rec: str) -> Tuple[FeatureMatrix, np.ndarray]:
        feats = sad_features(corpus.audio[rec], cfg.frontend, cfg.mlp.context)
        return feats, frame_labels(refs[rec], feats.n_frames, feats.frame_rate)

    dataset = list(fan_out(corpus.train_ids, prepare, workers).values())
    return sad.mlp_train(dataset, cfg.mlp.hidden_sizes, cfg.mlp.train_config(cfg.seed))


def infer_posteriors(corpus: Corpus, params: MlpParams, cfg: PipelineConfig,
                     recordings: Iterable[str], workers: int = 1) -> Dict[str, FramePosteriors]:
    def run(rec: str) -> FramePosteriors:
        post = sad.mlp_forward(params, sad_features(corpus.audio[rec], cfg.frontend, cfg.mlp.context))
        # rounded to the precision of the persisted FEAT file so re-scoring is exact
        probs = post.probs.astype(np.float32).astype(np.float64)
        return FramePosteriors(probs=probs, frame_rate=post.frame_rate, recording_id=rec)

    return fan_out(recordings, run, workers)


def sad_segments(posteriors: Mapping[str, FramePosteriors], post_cfg: SadPostConfig) -> Segments:
    return {rec: sad.postprocess(post, post_cfg) for rec, post in sorted(posteriors.items())}


def save_posteriors(out_dir: Path, posteriors: Mapping[str, FramePosteriors]) -> List[Path]:
    written = []
    for rec, post in sorted(posteriors.items()):
        feats = FeatureMatrix(rows=post.probs[:, None], frame_rate=post.frame_rate, recording_id=rec)
        written.append(data_loader.write_features(out_dir / f"{rec}.feat", feats))
    return written


def load_posteriors(in_dir: Path, recordings: Iterable[str]) -> Optional[Dict[str, FramePosteriors]]:
    """Persisted posteriors for every recording, or None when any is missing"""
    out = {}
    for rec in sorted(recordings):
        path = in_dir / f"{rec}.feat"
        if not path.exists():
            return None
        feats = data_loader.read_features(path, rec)
        out[rec] = FramePosteriors(probs=np.clip(feats.rows[:, 0], 0.0, 1.0), frame_rate=feats.frame_rate,
                                   recording_id=rec)
    return out


def score_sad(posteriors: Mapping[str, FramePosteriors], refs: Segments, post_cfg: SadPostConfig,
              durations: Mapping[str, float], pooling: str) -> pd.DataFrame:
    """DCF and DCF_INV for the raw (threshold only) and postprocessed outputs"""
    missing = sorted(set(posteriors) - set(refs))
    if missing:
        raise CoverageError(f"no SAD labels for {', '.join(missing[:5])}")
    rows = []
    for name, cfg in (('raw', sad.raw_config(post_cfg.f_thd)), ('post', post_cfg)):
        stats = pool_sad_stats(sad.evaluate_postprocess(posteriors, refs, cfg, durations), pooling)
        rows.append({'output': name, 'p_miss': stats.p_fn, 'p_fa': stats.p_fp,
                     'dcf': dcf(stats), 'dcf_inv': dcf_inv(stats)})
    return pd.DataFrame(rows, columns=SAD_SCORE_COLUMNS)


def score_sad_labels(hyps: Segments, refs: Segments, durations: Mapping[str, float], pooling: str) -> pd.DataFrame:
    """DCF and DCF_INV of a hypothesis label file against the reference labels"""
    missing = sorted(set(durations) - set(hyps))
    if missing:
        raise CoverageError(f"no hypothesis labels for {', '.join(missing[:5])}")
    stats = pool_sad_stats([sad_error_durations(refs.get(rec, []), hyps[rec], durations[rec])
                            for rec in sorted(durations)], pooling)
    return pd.DataFrame([{'output': 'hyp', 'p_miss': stats.p_fn, 'p_fa': stats.p_fp,
                          'dcf': dcf(stats), 'dcf_inv': dcf_inv(stats)}], columns=SAD_SCORE_COLUMNS)


# ==================== EMBEDDINGS ====================

def extractor_specs(cfg: PipelineConfig) -> List[Tuple[str, FrameSpec, int]]:
    """(name, frontend, projection seed) for the toy extractors in use"""
    iv_spec = cfg.embed.frontend
    xv_spec = iv_spec.model_copy(update={'include_deltas': False})
    xv = ('toy_xv', xv_spec, cfg.seed + 1)
    if cfg.embed.fuse:
        return [('toy_iv', iv_spec, cfg.seed), xv]
    return [xv]


def _has_frames(feats: FeatureMatrix, chunk: Chunk) -> bool:
    try:
        embeddings.chunk_frames(feats, chunk)
    except EmptyChunkError:
        logger.debug("chunk_without_frames", recording_id=chunk.recording_id, start=chunk.start)
        return False
    return True


def recording_embeddings(path: Path, chunks: Sequence[Chunk], cfg: PipelineConfig) -> EmbeddingSet:
    """Toy embeddings of one recording's chunks, fused over extractors when configured"""
    parts = []
    for _, spec, seed in extractor_specs(cfg):
        feats = compute_mfcc(read_wav(path), spec)
        usable = [c for c in chunks if _has_frames(feats, c)]
        parts.append(embeddings.extract_embeddings(feats, usable, cfg.embed.toy_dim, seed))
    fused = parts[0]
    for part in parts[1:]:
        fused = embeddings.fuse(fused, part)
    return fused


def speech_chunks(segments: Sequence[LabeledSegment], cfg: PipelineConfig, rec: str) -> List[Chunk]:
    speech = [seg for seg in segments if seg.is_speech]
    return embeddings.make_chunks(speech, cfg.chunking.chunk_len, cfg.chunking.step,
                                  cfg.chunking.min_len, rec)


def training_embeddings(corpus: Corpus, cfg: PipelineConfig, workers: int = 1) -> EmbeddingSet:
    """Speaker-labeled embeddings of train_chunk_len pieces cut from the reference speaker turns"""
    refs = corpus.require('speakers')

    def run(rec: str) -> EmbeddingSet:
        chunks = embeddings.merge_speaker_chunks(refs.get(rec, []), cfg.chunking.train_chunk_len, rec)
        return recording_embeddings(corpus.audio[rec], chunks, cfg)

    parts = [part for part in fan_out(corpus.train_ids, run, workers).values() if len(part)]
    return embeddings.merge_sets(parts)


def external_embeddings(cfg: PipelineConfig) -> Optional[EmbeddingSet]:
    """Embedding files named in the configuration, fused when a secondary file is given"""
    if cfg.paths.embeddings is None:
        return None
    primary = embeddings.load_embeddings(cfg.paths.embeddings)
    if cfg.paths.embeddings_secondary is None:
        return primary
    return embeddings.fuse(primary, embeddings.load_embeddings(cfg.paths.embeddings_secondary))


def label_by_reference(emb: EmbeddingSet, refs: Segments) -> EmbeddingSet:
    """Keep vectors overlapping reference speech, labeled with the most-overlapping speaker"""
    speakers = {}
    for key in emb.keys():
        rec, start, end = key
        overlaps: Dict[str, float] = {}
        for seg in refs.get(rec, []):
            overlap = min(end, seg.end) - max(start, seg.start)
            if overlap > 0:
                overlaps[seg.label] = overlaps.get(seg.label, 0.0) + overlap
        if overlaps:
            speakers[key] = min(overlaps, key=lambda spk: (-overlaps[spk], spk))
    return EmbeddingSet({key: emb.entries[key] for key in speakers}, emb.dim, emb.kind, speakers)


def backend_training_set(corpus: Corpus, cfg: PipelineConfig, workers: int = 1,
                         external: Optional[EmbeddingSet] = None) -> EmbeddingSet:
    """Speaker-labeled train vectors: from an embedding file when given, else toy embeddings"""
    if external is not None:
        return label_by_reference(external.subset(corpus.train_ids), corpus.require('speakers'))
    return training_embeddings(corpus, cfg, workers)


def diarization_inputs(corpus: Corpus, segments: Segments, cfg: PipelineConfig, recordings: Iterable[str],
                       workers: int = 1, external: Optional[EmbeddingSet] = None
                       ) -> Dict[str, diarization.RecordingInput]:
    """(chunks, raw vectors) per recording from speech segments, or from an embedding file"""
    recordings = sorted(recordings)
    if external is not None:
        out = {}
        for rec in recordings:
            keys, vectors = external.matrix(rec)
            out[rec] = ([Chunk(rec, start, end) for _, start, end in keys], vectors)
        return out

    def run(rec: str) -> diarization.RecordingInput:
        chunks = speech_chunks(segments.get(rec, []), cfg, rec)
        emb = recording_embeddings(corpus.audio[rec], chunks, cfg)
        keys, vectors = emb.matrix(rec)
        by_key = {chunk.key: chunk for chunk in chunks}
        return [by_key[key] for key in keys], vectors

    return fan_out(recordings, run, workers)


# ==================== DIARIZATION BACK END ====================

@dataclass(frozen=True, eq=False)
class Backend:
    whitener: WhitenModel
    plda: PldaModel


def fit_backend(train: EmbeddingSet, cfg: PipelineConfig,
                extra: Sequence[EmbeddingSet] = ()) -> Backend:
    """Whitener on train (plus extra sets unless whiten_train_only), PLDA on whitened train vectors"""
    pooled = [train] if cfg.embed.whiten_train_only else [train, *extra]
    whitener = embeddings.fit_whitener(*pooled, dim=cfg.embed.whiten_dim)
    plda = diarization.plda_fit(whitener.apply_set(train))
    return Backend(whitener=whitener, plda=plda)


def save_backend(backend: Backend, models_dir: Path) -> List[Path]:
    return [backend.whitener.save(models_dir / config.WHITEN_MODEL_FILE),
            backend.plda.save(models_dir / config.PLDA_MODEL_FILE)]


def load_backend(models_dir: Path) -> Optional[Backend]:
    whiten_path = models_dir / config.WHITEN_MODEL_FILE
    plda_path = models_dir / config.PLDA_MODEL_FILE
    if not (whiten_path.exists() and plda_path.exists()):
        return None
    return Backend(whitener=WhitenModel.load(whiten_path), plda=PldaModel.load(plda_path))


def whiten_inputs(inputs: Mapping[str, diarization.RecordingInput],
                  whitener: WhitenModel) -> Dict[str, diarization.RecordingInput]:
    return {rec: (chunks, whitener.apply(vectors) if len(vectors) else vectors)
            for rec, (chunks, vectors) in sorted(inputs.items())}


def run_variant(white_inputs: Mapping[str, diarization.RecordingInput], backend: Backend, variant: str,
                cfg: PipelineConfig, ahc_cfg: Optional[AhcConfig] = None, workers: int = 1) -> Segments:
    ahc, vb = diarization.variant_configs(variant, ahc_cfg or cfg.ahc, cfg.vb, cfg.uc_extra_components)
    return diarization.diarize_corpus(white_inputs, backend.plda, ahc, vb, workers)


def single_speaker(segments: Segments) -> Segments:
    """Every speech segment attributed to one speaker per recording"""
    return {rec: [LabeledSegment(s.start, s.end, diarization.speaker_name(0)) for s in segs if s.is_speech]
            for rec, segs in sorted(segments.items())}


def inputs_as_set(inputs: Mapping[str, diarization.RecordingInput]) -> EmbeddingSet:
    entries = {chunk.key: vector for _, (chunks, vectors) in sorted(inputs.items())
               for chunk, vector in zip(chunks, vectors)}
    dim = next((vectors.shape[1] for _, vectors in inputs.values() if len(vectors)), 0)
    return EmbeddingSet(entries, dim, "toy")


def transcripts_for(transcripts: Optional[Mapping[str, List[str]]],
                    recordings: Iterable[str]) -> Optional[Dict[str, List[str]]]:
    """Utterances whose id encodes one of the given recordings"""
    if not transcripts:
        return None
    wanted = set(recordings)
    selected = {}
    for utt, words in transcripts.items():
        parsed = data_loader.parse_utt_id(utt)
        if parsed is not None and parsed[0] in wanted:
            selected[utt] = words
    return selected or None


def reference_speech(refs: Segments, recordings: Iterable[str]) -> Segments:
    return {rec: [LabeledSegment(s.start, s.end, SPEECH) for s in refs.get(rec, []) if s.is_speech]
            for rec in sorted(recordings)}


# ==================== EXPERIMENT ====================

def _tuned_sad_configs(corpus: Corpus, cfg: PipelineConfig, params: MlpParams,
                       workers: int) -> Tuple[Dict[str, FramePosteriors], Dict[str, float], Dict[str, SadPostConfig]]:
    refs = corpus.require('sad')
    posteriors = infer_posteriors(corpus, params, cfg, corpus.dev_ids, workers)
    durations = audio_durations(corpus, corpus.dev_ids, workers)
    tuned = {}
    for objective in cfg.sad_objectives:
        tuned[objective], _ = sad.tune_postprocess(posteriors, refs, objective, cfg.sad_grid, durations,
                                                   cfg.metrics.pooling, workers)
    return posteriors, durations, tuned


def run_experiment(corpus: Corpus, cfg: PipelineConfig, workers: int = 1) -> Tuple[pd.DataFrame, Dict[str, object]]:
    """
    Segmentation impact matrix: {SAD tuned per objective} x {no diarization, each variant}

    The SAD model is trained on the train split and tuned per objective on dev; the
    whitener and PLDA come from train reference turns; the AHC threshold and PCA size are
    tuned on dev with reference speech. Every row is scored on dev. A WER column is added
    when reference transcripts are available.

    Returns:
        (comparison table, parameter provenance)
    """
    if len(cfg.sad_objectives) < 2:
        raise UsageError("the experiment needs at least two SAD operating points")
    speaker_refs = corpus.require('speakers')
    dev = corpus.dev_ids
    missing = sorted(set(dev) - set(speaker_refs))
    if missing:
        raise CoverageError(f"no reference speakers for dev recordings {', '.join(missing[:5])}")

    params = train_sad(corpus, cfg, workers)
    posteriors, durations, tuned = _tuned_sad_configs(corpus, cfg, params, workers)

    dev_ref_speech = reference_speech(speaker_refs, dev)
    ref_inputs = diarization_inputs(corpus, dev_ref_speech, cfg, dev, workers)
    backend = fit_backend(training_embeddings(corpus, cfg, workers), cfg, extra=[inputs_as_set(ref_inputs)])
    ahc_cfg, _ = diarization.tune_diarization(whiten_inputs(ref_inputs, backend.whitener),
                                              speaker_refs, backend.plda, cfg.ahc_grid, cfg.ahc,
                                              collar=cfg.metrics.collar, frame=cfg.metrics.frame, workers=workers)

    dev_refs = {rec: speaker_refs[rec] for rec in dev}
    dev_transcripts = transcripts_for(corpus.transcripts, dev)

    rows = []
    for objective in cfg.sad_objectives:
        post_cfg = tuned[objective]
        segments = sad_segments(posteriors, post_cfg)
        stats = pool_sad_stats(sad.evaluate_postprocess(posteriors, corpus.require('sad'), post_cfg, durations),
                               cfg.metrics.pooling)
        white = whiten_inputs(diarization_inputs(corpus, segments, cfg, dev, workers), backend.whitener)
        systems = [('none', single_speaker(segments))]
        systems += [(variant, run_variant(white, backend, variant, cfg, ahc_cfg, workers))
                    for variant in cfg.variants]
        for variant, hyps in systems:
            total, _ = der_corpus(dev_refs, hyps, cfg.metrics.collar, cfg.metrics.frame)
            row = {
                'sad_objective': objective,
                'sad_config': f"f_thd={post_cfg.f_thd} s_min={post_cfg.s_min} s_thd={post_cfg.s_thd}",
                'diarization': variant,
                'p_miss': stats.p_fn,
                'p_fa': stats.p_fp,
                'dcf': dcf(stats),
                'dcf_inv': dcf_inv(stats),
                'der': total.der,
                'missed': total.missed / total.ref_speech,
                'false_alarm': total.false_alarm / total.ref_speech,
                'confusion': total.confusion / total.ref_speech,
                'speaker_mae': speaker_count_report(dev_refs, hyps).mae,
            }
            if dev_transcripts:
                ref_streams, hyp_streams = segmentation_transcripts(dev_transcripts, hyps)
                row['wer'] = wer_corpus(ref_streams, hyp_streams).wer
            rows.append(row)

    provenance = {
        'sad': {objective: c.model_dump() for objective, c in tuned.items()},
        'ahc': ahc_cfg.model_dump(),
        'sad_final_loss': params.losses[-1] if params.losses else None,
    }
    logger.info("experiment_finished", rows=len(rows))
    return pd.DataFrame(rows), provenance


def der_summary(total: DerBreakdown) -> Dict[str, float]:
    return {'der': total.der, 'missed': total.missed, 'false_alarm': total.false_alarm,
            'confusion': total.confusion, 'ref_speech': total.ref_speech}
