"""
Command-line interface
Subcommands sad, diarize, experiment, report, select-sst and synth; every toolkit error
is logged to stderr and mapped to its exit code
"""

import argparse
import time
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import structlog

import config
from src import __version__, data_loader, pipeline, reports, sad
from src.diarization import tune_diarization
from src.errors import StepscoreError, UsageError
from src.log import configure_logging
from src.metrics import der_corpus, speaker_count_report
from src.settings import PipelineConfig, dump_config, load_config
from src.sst_select import duration_report, select_segments, weighting_manifest
from src.synth import write_corpus
from src.utils import atomic_write_text

logger = structlog.get_logger(__name__)


# ==================== HELPERS ====================

def _out_dir(cfg: PipelineConfig, *parts: str) -> Path:
    path = Path(cfg.paths.output_dir, *parts)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _split(corpus: pipeline.Corpus, name: str) -> List[str]:
    return {'train': corpus.train_ids, 'dev': corpus.dev_ids, 'all': corpus.recordings}[name]


def _write_env(path: Path, values: Mapping[str, object]) -> Path:
    """Tuned settings as KEY=value lines, loadable with --config"""
    return atomic_write_text(path, "".join(f"{key}={values[key]}\n" for key in sorted(values)))


def _sad_model(cfg: PipelineConfig) -> sad.MlpParams:
    path = cfg.paths.models / config.SAD_MODEL_FILE
    if not path.exists():
        raise UsageError(f"no SAD model at {path}; run `sad train` first")
    return sad.load_mlp(path)


def _posteriors(corpus: pipeline.Corpus, cfg: PipelineConfig, recordings: Sequence[str],
                workers: int) -> Dict[str, sad.FramePosteriors]:
    """Persisted posteriors from `sad infer` when complete, else fresh inference"""
    persisted = pipeline.load_posteriors(Path(cfg.paths.output_dir, "sad", "posteriors"), recordings)
    if persisted is not None:
        return persisted
    return pipeline.infer_posteriors(corpus, _sad_model(cfg), cfg, recordings, workers)


def _speech_segments(corpus: pipeline.Corpus, cfg: PipelineConfig, mode: str,
                     recordings: Sequence[str], workers: int) -> pipeline.Segments:
    if mode == 'ref':
        refs = corpus.sad_refs if corpus.sad_refs is not None else corpus.require('speakers')
        return pipeline.reference_speech(refs, recordings)
    return pipeline.sad_segments(_posteriors(corpus, cfg, recordings, workers), cfg.sad)


def _backend(corpus: pipeline.Corpus, cfg: PipelineConfig, inputs, workers: int, external) -> pipeline.Backend:
    models = cfg.paths.models
    backend = pipeline.load_backend(models)
    if backend is not None:
        logger.info("backend_loaded", models_dir=str(models))
        return backend
    train = pipeline.backend_training_set(corpus, cfg, workers, external)
    backend = pipeline.fit_backend(train, cfg, extra=[pipeline.inputs_as_set(inputs)])
    models.mkdir(parents=True, exist_ok=True)
    pipeline.save_backend(backend, models)
    return backend


# ==================== COMMANDS ====================

def cmd_synth(args, cfg: PipelineConfig, report: reports.RunReport) -> None:
    out = _out_dir(cfg)
    report.metrics.update(write_corpus(out, cfg.synth, cfg.seed))
    report.parameters = cfg.synth.model_dump()


def cmd_sad(args, cfg: PipelineConfig, report: reports.RunReport) -> None:
    corpus = pipeline.load_corpus(cfg)
    out = _out_dir(cfg, "sad")
    workers = cfg.workers

    if args.action == 'train':
        params = pipeline.train_sad(corpus, cfg, workers)
        cfg.paths.models.mkdir(parents=True, exist_ok=True)
        path = sad.save_mlp(cfg.paths.models / config.SAD_MODEL_FILE, params)
        report.metrics.update({'initial_loss': params.losses[0], 'final_loss': params.losses[-1]})
        report.parameters = cfg.mlp.model_dump()
        report.artifacts.append(str(path))
        return

    recordings = _split(corpus, args.split)
    if args.action == 'infer':
        posteriors = pipeline.infer_posteriors(corpus, _sad_model(cfg), cfg, recordings, workers)
        report.artifacts.extend(str(p) for p in pipeline.save_posteriors(out / "posteriors", posteriors))
        segments = pipeline.sad_segments(posteriors, cfg.sad)
        report.artifacts.append(str(data_loader.write_label_file(out / "hyp.lab", segments)))
        report.parameters = cfg.sad.model_dump()
        report.metrics['speech_segments'] = sum(len(s) for s in segments.values())
        return

    refs = corpus.require('sad')
    durations = pipeline.audio_durations(corpus, recordings, workers)
    if args.action == 'score' and args.hyp:
        hyps = data_loader.read_label_file(args.hyp)
        table = pipeline.score_sad_labels(hyps, refs, durations, cfg.metrics.pooling)
        report.artifacts.append(str(reports.write_csv(out / "sad_scores.csv", table)))
        report.metrics.update(table.iloc[0].drop('output').to_dict())
        return

    posteriors = _posteriors(corpus, cfg, recordings, workers)
    if args.action == 'score':
        table = pipeline.score_sad(posteriors, refs, cfg.sad, durations, cfg.metrics.pooling)
        report.artifacts.append(str(reports.write_csv(out / "sad_scores.csv", table)))
        report.metrics.update({row['output']: {k: row[k] for k in ('p_miss', 'p_fa', 'dcf', 'dcf_inv')}
                               for row in table.to_dict('records')})
        report.parameters = cfg.sad.model_dump()
        return

    best, cost = sad.tune_postprocess(posteriors, refs, args.objective, cfg.sad_grid, durations,
                                      cfg.metrics.pooling, workers)
    values = {f"SAD__{key.upper()}": value for key, value in best.model_dump().items()}
    report.artifacts.append(str(_write_env(_out_dir(cfg) / config.TUNED_SAD_FILE, values)))
    report.metrics.update({'objective': args.objective, 'cost': cost})
    report.parameters = best.model_dump()


def cmd_diarize(args, cfg: PipelineConfig, report: reports.RunReport) -> None:
    corpus = pipeline.load_corpus(cfg)
    out = _out_dir(cfg, "diarize")
    workers = cfg.workers
    recordings = _split(corpus, args.split)
    variants = [args.variant] if args.variant else list(cfg.variants)

    if args.action == 'score':
        refs = corpus.require('speakers')
        refs = {rec: refs.get(rec, []) for rec in recordings}
        if args.hyp:
            targets = [(args.variant or 'hyp', Path(args.hyp))]
        else:
            targets = [(variant, out / variant / "hyp.rttm") for variant in variants]
        for variant, hyp_path in targets:
            if not hyp_path.exists():
                raise UsageError(f"no hypothesis RTTM at {hyp_path}; run `diarize run` first")
            hyps = data_loader.read_rttm(hyp_path)
            total, per_recording = der_corpus(refs, hyps, cfg.metrics.collar, cfg.metrics.frame)
            counts = speaker_count_report(refs, hyps)
            report.artifacts.append(str(reports.write_csv(out / f"der_{variant}.csv",
                                                          reports.der_frame(total, per_recording))))
            report.artifacts.append(str(reports.write_csv(out / f"speaker_counts_{variant}.csv",
                                                          reports.speaker_count_frame(counts))))
            if args.plot:
                report.artifacts.append(str(reports.plot_speaker_counts(counts, out / f"speaker_counts_{variant}.svg")))
            report.metrics[variant] = {**pipeline.der_summary(total), 'speaker_mae': counts.mae}
            report.per_recording[variant] = {rec: b.der if b.ref_speech > 0 else None
                                             for rec, b in per_recording.items()}
        report.parameters = cfg.metrics.model_dump()
        return

    external = pipeline.external_embeddings(cfg)
    segments = _speech_segments(corpus, cfg, args.sad, recordings, workers)
    inputs = pipeline.diarization_inputs(corpus, segments, cfg, recordings, workers, external)
    backend = _backend(corpus, cfg, inputs, workers, external)
    white = pipeline.whiten_inputs(inputs, backend.whitener)

    if args.action == 'tune':
        refs = corpus.require('speakers')
        best, value = tune_diarization(white, refs, backend.plda, cfg.ahc_grid, cfg.ahc,
                                       collar=cfg.metrics.collar, frame=cfg.metrics.frame, workers=workers)
        values = {'AHC__STOP_THRESHOLD': best.stop_threshold, 'AHC__PCA_COMPONENTS': best.pca_components}
        report.artifacts.append(str(_write_env(_out_dir(cfg) / config.TUNED_AHC_FILE, values)))
        report.metrics.update({'der': value})
        report.parameters = best.model_dump()
        return

    for variant in variants:
        hyps = pipeline.run_variant(white, backend, variant, cfg, workers=workers)
        path = data_loader.write_rttm(out / variant / "hyp.rttm", hyps)
        report.artifacts.append(str(path))
        report.metrics[variant] = {'speakers': sum(len({s.label for s in segs}) for segs in hyps.values())}
    report.parameters = {'sad': args.sad, 'ahc': cfg.ahc.model_dump(), 'vb': cfg.vb.model_dump()}


def cmd_experiment(args, cfg: PipelineConfig, report: reports.RunReport) -> None:
    corpus = pipeline.load_corpus(cfg)
    table, provenance = pipeline.run_experiment(corpus, cfg, cfg.workers)
    report.artifacts.append(str(reports.write_csv(_out_dir(cfg) / "experiment.csv", table)))
    report.metrics['rows'] = table.to_dict('records')
    report.parameters = provenance


def _read_segments(path: Path) -> pipeline.Segments:
    if path.suffix.lower() == ".rttm":
        return data_loader.read_rttm(path)
    return data_loader.read_label_file(path)


def cmd_report(args, cfg: PipelineConfig, report: reports.RunReport) -> None:
    out = _out_dir(cfg, "reports")
    if args.kind == 'durations':
        segments = _read_segments(Path(args.input))
        histogram = reports.duration_histogram(reports.segment_durations(segments))
        report.artifacts.append(str(reports.write_csv(out / "durations.csv", histogram)))
        if args.plot:
            report.artifacts.append(str(reports.plot_duration_histogram(histogram, out / "durations.svg")))
        report.metrics.update({'segments': int(histogram['count'].sum()) if not histogram.empty else 0,
                               'median_bin': reports.median_bin(histogram)})
        return

    if not args.hyp:
        raise UsageError("report speakers needs --hyp")
    refs = _read_segments(Path(args.input))
    hyps = _read_segments(Path(args.hyp))
    counts = speaker_count_report(refs, hyps)
    report.artifacts.append(str(reports.write_csv(out / "speaker_counts.csv", reports.speaker_count_frame(counts))))
    if args.plot:
        report.artifacts.append(str(reports.plot_speaker_counts(counts, out / "speaker_counts.svg")))
    report.metrics['speaker_mae'] = counts.mae


def cmd_select_sst(args, cfg: PipelineConfig, report: reports.RunReport) -> None:
    out = _out_dir(cfg, "sst")
    hyps = data_loader.read_hyp_segments(args.hyps)
    supervised = data_loader.read_hyp_segments(args.supervised) if args.supervised else []
    sst = cfg.sst
    selected, selection = select_segments(hyps, sst.min_dur, sst.max_dur, sst.min_conf, sst.target_hours())
    manifest = weighting_manifest(supervised, selected, sst.weight_sup, sst.weight_unsup)

    report.artifacts.append(str(data_loader.write_hyp_segments(out / "selected.tsv", selected)))
    report.artifacts.append(str(reports.write_csv(out / "selection_report.csv", selection.to_frame())))
    report.artifacts.append(str(data_loader.write_manifest(out / "manifest.tsv", manifest)))
    supervised_hours = duration_report(supervised)
    report.metrics.update({
        'selected_speech_hours': selection.selected_speech_hours,
        'selected_nonspeech_hours': selection.selected_nonspeech_hours,
        'supervised_speech_hours': supervised_hours.selected_speech_hours,
        'rejections': selection.rejections,
    })
    report.parameters = sst.model_dump()


def _flat_metrics(metrics: Mapping[str, object], prefix: str = "") -> List[str]:
    lines = []
    for key, value in metrics.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            lines.extend(_flat_metrics(value, name + "."))
        elif isinstance(value, float):
            lines.append(f"{name:<32} {value:.4f}")
        elif isinstance(value, (int, str)):
            lines.append(f"{name:<32} {value}")
    return lines


def print_summary(report: reports.RunReport) -> None:
    """Headline metrics on stdout; logs stay on stderr"""
    print("=" * 60)
    print(f"stepscore {report.command} finished in {report.wall_time:.2f}s")
    print("=" * 60)
    for line in _flat_metrics(report.metrics):
        print(line)
    for artifact in report.artifacts:
        print(f"wrote {artifact}")


# ==================== PARSER ====================

def _common_flags(defaults: bool) -> argparse.ArgumentParser:
    """Global flags; subcommands accept them too without overwriting earlier values"""
    default = None if defaults else argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=default, help="key=value configuration file")
    common.add_argument("--workers", type=int, default=default, help="parallel recordings")
    common.add_argument("--seed", type=int, default=default, help="global random seed")
    common.add_argument("--out", default=default, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=False if defaults else argparse.SUPPRESS)
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stepscore", parents=[_common_flags(True)],
                                     description="Speech activity detection, diarization and scoring toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_flags(False)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus into --out")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("sad", parents=[common], help="train, run, score or tune speech activity detection")
    p.add_argument("action", choices=["train", "infer", "score", "tune"])
    p.add_argument("--split", choices=["train", "dev", "all"], default="dev")
    p.add_argument("--objective", choices=sorted(sad.OBJECTIVES), default="dcf")
    p.add_argument("--hyp", default=None, help="hypothesis label file to score instead of the model output")
    p.set_defaults(handler=cmd_sad)

    p = sub.add_parser("diarize", parents=[common], help="run, score or tune speaker diarization")
    p.add_argument("action", choices=["run", "score", "tune"])
    p.add_argument("--sad", choices=["ref", "system"], default="ref", help="speech segments to diarize")
    p.add_argument("--variant", choices=config.SD_VARIANTS, default=None)
    p.add_argument("--split", choices=["train", "dev", "all"], default="dev")
    p.add_argument("--hyp", default=None, help="hypothesis RTTM to score")
    p.add_argument("--plot", action="store_true", help="also write SVG charts")
    p.set_defaults(handler=cmd_diarize)

    p = sub.add_parser("experiment", parents=[common], help="segmentation impact comparison table")
    p.set_defaults(handler=cmd_experiment)

    p = sub.add_parser("report", parents=[common], help="duration histogram or speaker-count report")
    p.add_argument("kind", choices=["durations", "speakers"])
    p.add_argument("--input", required=True, help="label file or RTTM (reference for speakers)")
    p.add_argument("--hyp", default=None, help="hypothesis RTTM for speakers")
    p.add_argument("--plot", action="store_true", help="also write SVG charts")
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("select-sst", parents=[common], help="select automatically labeled training data")
    p.add_argument("--hyps", required=True, help="TSV of hypothesised segments")
    p.add_argument("--supervised", default=None, help="TSV of supervised segments for the manifest")
    p.set_defaults(handler=cmd_select_sst)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else config.EXIT_CODES['usage']

    configure_logging("DEBUG" if args.verbose else config.LOG_LEVEL)
    started = time.perf_counter()
    overrides = {'WORKERS': args.workers, 'SEED': args.seed, 'PATHS__OUTPUT_DIR': args.out}
    try:
        cfg = load_config(args.config, overrides)
        action = getattr(args, 'action', None) or getattr(args, 'kind', None)
        report = reports.RunReport(command=" ".join(filter(None, [args.command, action])))
        args.handler(args, cfg, report)
        out = _out_dir(cfg)
        atomic_write_text(out / "resolved_config.env", dump_config(cfg))
        report.write(out, started)
        print_summary(report)
    except StepscoreError as e:
        logger.error("command_failed", command=args.command, error=str(e), kind=type(e).__name__,
                     exit_code=e.exit_code)
        return e.exit_code
    return config.EXIT_CODES['ok']
