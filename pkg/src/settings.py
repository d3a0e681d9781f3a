"""
Runtime configuration
A key=value file (python-dotenv syntax) plus STEPSCORE_ environment overrides, validated
into one pydantic model tree. Nested keys use a double underscore: SAD__F_THD=0.02
"""

import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Union

import structlog
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

import config
from src.diarization import AhcConfig, AhcTuningGrid, VbConfig
from src.errors import UsageError
from src.frontend import FrameSpec
from src.sad import SadPostConfig, TrainConfig, TuningGrid
from src.synth import SynthConfig

logger = structlog.get_logger(__name__)

# Environment variables with the prefix that are not configuration keys
RESERVED_ENV_KEYS = {'LOG_LEVEL', 'LOG_FORMAT'}


def _split_csv(value):
    if isinstance(value, str):
        return [v.strip() for v in value.split(',') if v.strip()]
    return value


class PathsConfig(BaseModel):
    """Corpus inputs default to the standard file names inside corpus_dir"""

    corpus_dir: Optional[Path] = None
    audio_dir: Optional[Path] = None
    sad_ref: Optional[Path] = None
    rttm_ref: Optional[Path] = None
    transcripts: Optional[Path] = None
    train_list: Optional[Path] = None
    dev_list: Optional[Path] = None
    embeddings: Optional[Path] = None
    embeddings_secondary: Optional[Path] = None
    models_dir: Optional[Path] = None
    output_dir: Path = config.OUTPUT_DIR

    @model_validator(mode='after')
    def _inputs_exist(self):
        for name in ('corpus_dir', 'audio_dir', 'sad_ref', 'rttm_ref', 'transcripts',
                     'train_list', 'dev_list', 'embeddings', 'embeddings_secondary'):
            value = getattr(self, name)
            if value is not None and not value.exists():
                raise ValueError(f"{name}: {value} does not exist")
        return self

    def _corpus_file(self, explicit: Optional[Path], default_name: str) -> Optional[Path]:
        if explicit is not None:
            return explicit
        if self.corpus_dir is not None and (self.corpus_dir / default_name).exists():
            return self.corpus_dir / default_name
        return None

    @property
    def audio(self) -> Optional[Path]:
        return self._corpus_file(self.audio_dir, config.CORPUS_AUDIO_SUBDIR)

    @property
    def sad_reference(self) -> Optional[Path]:
        return self._corpus_file(self.sad_ref, config.CORPUS_SAD_REF)

    @property
    def rttm_reference(self) -> Optional[Path]:
        return self._corpus_file(self.rttm_ref, config.CORPUS_RTTM_REF)

    @property
    def transcript_file(self) -> Optional[Path]:
        return self._corpus_file(self.transcripts, config.CORPUS_TRANSCRIPTS)

    @property
    def train_ids(self) -> Optional[Path]:
        return self._corpus_file(self.train_list, config.CORPUS_TRAIN_LIST)

    @property
    def dev_ids(self) -> Optional[Path]:
        return self._corpus_file(self.dev_list, config.CORPUS_DEV_LIST)

    @property
    def models(self) -> Path:
        return self.models_dir or self.output_dir / "models"


class MlpConfig(BaseModel):
    hidden_sizes: List[int] = Field(default_factory=lambda: list(config.SAD_MODEL_SHAPES['2x256']))
    context: int = Field(default=config.SAD_CONTEXT, ge=1)
    learning_rate: float = Field(default=config.SAD_TRAIN_DEFAULTS['learning_rate'], gt=0)
    momentum: float = Field(default=config.SAD_TRAIN_DEFAULTS['momentum'], ge=0, lt=1)
    epochs: int = Field(default=config.SAD_TRAIN_DEFAULTS['epochs'], ge=1)
    batch_size: int = Field(default=config.SAD_TRAIN_DEFAULTS['batch_size'], ge=1)
    normalize: bool = True

    @field_validator('hidden_sizes', mode='before')
    @classmethod
    def _shape(cls, value):
        if isinstance(value, str) and value in config.SAD_MODEL_SHAPES:
            return list(config.SAD_MODEL_SHAPES[value])
        return _split_csv(value)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, momentum=self.momentum, epochs=self.epochs,
                           batch_size=self.batch_size, seed=seed, normalize=self.normalize)


class ChunkingConfig(BaseModel):
    chunk_len: float = Field(default=config.CHUNKING_DEFAULTS['chunk_len'], gt=0)
    step: float = Field(default=config.CHUNKING_DEFAULTS['step'], gt=0)
    min_len: float = Field(default=config.CHUNKING_DEFAULTS['min_len'], ge=0)
    train_chunk_len: float = Field(default=config.CHUNKING_DEFAULTS['train_chunk_len'], gt=0)

    @model_validator(mode='after')
    def _step_within_chunk(self):
        if self.step > self.chunk_len:
            raise ValueError("step must not exceed chunk_len")
        return self


class EmbeddingConfig(BaseModel):
    toy_dim: int = Field(default=config.EMBEDDING_DEFAULTS['toy_dim'], ge=1)
    fuse: bool = config.EMBEDDING_DEFAULTS['fuse']
    whiten_train_only: bool = config.EMBEDDING_DEFAULTS['whiten_train_only']
    whiten_dim: Optional[int] = Field(default=None, ge=1)
    frontend: FrameSpec = Field(default_factory=lambda: FrameSpec(**config.EMBEDDING_FRONTEND_DEFAULTS))


class MetricsConfig(BaseModel):
    collar: float = Field(default=config.METRICS_DEFAULTS['collar'], ge=0)
    frame: float = Field(default=config.METRICS_DEFAULTS['frame'], gt=0)
    pooling: Literal['pooled', 'mean'] = config.METRICS_DEFAULTS['pooling']


class SstConfig(BaseModel):
    min_dur: float = Field(default=config.SST_DEFAULTS['min_dur'], ge=0)
    max_dur: float = Field(default=config.SST_DEFAULTS['max_dur'], gt=0)
    min_conf: float = Field(default=config.SST_DEFAULTS['min_conf'], ge=0, le=1)
    weight_sup: float = Field(default=config.SST_DEFAULTS['weight_sup'], gt=0)
    weight_unsup: float = Field(default=config.SST_DEFAULTS['weight_unsup'], gt=0)
    target_speech_hours: Optional[float] = Field(default=None, ge=0)
    target_nonspeech_hours: Optional[float] = Field(default=None, ge=0)

    def target_hours(self) -> Optional[Dict[str, float]]:
        targets = {'speech': self.target_speech_hours, 'non-speech': self.target_nonspeech_hours}
        targets = {kind: hours for kind, hours in targets.items() if hours is not None}
        return targets or None


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    paths: PathsConfig = Field(default_factory=PathsConfig)
    frontend: FrameSpec = Field(default_factory=FrameSpec)
    mlp: MlpConfig = Field(default_factory=MlpConfig)
    sad: SadPostConfig = Field(default_factory=SadPostConfig)
    sad_grid: TuningGrid = Field(default_factory=TuningGrid)
    chunking: ChunkingConfig = Field(default_factory=ChunkingConfig)
    embed: EmbeddingConfig = Field(default_factory=EmbeddingConfig)
    ahc: AhcConfig = Field(default_factory=AhcConfig)
    ahc_grid: AhcTuningGrid = Field(default_factory=AhcTuningGrid)
    vb: VbConfig = Field(default_factory=VbConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    sst: SstConfig = Field(default_factory=SstConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    variants: List[Literal['ahc', 'ahc_vb', 'ahc_uc_vb']] = Field(default_factory=lambda: list(config.SD_VARIANTS))
    uc_extra_components: int = Field(default=config.UC_EXTRA_COMPONENTS, ge=1)
    sad_objectives: List[Literal['dcf', 'dcf_inv']] = Field(default_factory=lambda: ['dcf', 'dcf_inv'])
    seed: int = config.DEFAULT_SEED
    workers: int = Field(default=config.DEFAULT_WORKERS, ge=1)

    @field_validator('variants', 'sad_objectives', mode='before')
    @classmethod
    def _lists(cls, value):
        return _split_csv(value)


# ==================== LOADING ====================

def _nest(flat: Mapping[str, Any]) -> Dict[str, Any]:
    """SECTION__SUB__KEY=value -> {'section': {'sub': {'key': value}}}"""
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        if value is None:
            continue
        parts = key.strip().lower().split('__')
        node = nested
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise UsageError(f"config key {key} conflicts with a scalar setting")
            node = child
        node[parts[-1]] = value
    return nested


def _check_keys(nested: Mapping[str, Any], model: type, prefix: str = "") -> None:
    for key, value in nested.items():
        if key not in model.model_fields:
            raise UsageError(f"unknown config key {(prefix + key).upper()}")
        annotation = model.model_fields[key].annotation
        if isinstance(value, dict) and isinstance(annotation, type) and issubclass(annotation, BaseModel):
            _check_keys(value, annotation, prefix + key + "__")


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> PipelineConfig:
    """
    Resolve the pipeline configuration

    Precedence, lowest first: defaults, the key=value file, STEPSCORE_ environment
    variables, explicit overrides (command-line flags).

    Args:
        path: Optional key=value config file
        overrides: Flat KEY=value pairs applied last
        environ: Environment mapping, defaults to os.environ

    Returns:
        Validated PipelineConfig

    Raises:
        UsageError: unreadable file, unknown key or invalid value
    """
    flat: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        flat.update({k.upper(): v for k, v in dotenv_values(path).items()})

    environ = os.environ if environ is None else environ
    for key, value in environ.items():
        if key.startswith(config.ENV_PREFIX):
            name = key[len(config.ENV_PREFIX):].upper()
            if name not in RESERVED_ENV_KEYS:
                flat[name] = value
    flat.update({k.upper(): v for k, v in (overrides or {}).items() if v is not None})

    nested = _nest(flat)
    _check_keys(nested, PipelineConfig)
    try:
        cfg = PipelineConfig.model_validate(nested)
    except ValidationError as e:
        raise UsageError(f"invalid configuration: {e}") from e
    logger.debug("config_loaded", source=str(path) if path else None, keys=len(flat))
    return cfg


def _flatten(value: Any, prefix: str, out: Dict[str, str]) -> None:
    if isinstance(value, dict):
        for key, child in value.items():
            _flatten(child, f"{prefix}__{key}" if prefix else key, out)
    elif value is None:
        return
    elif isinstance(value, bool):
        out[prefix.upper()] = "true" if value else "false"
    elif isinstance(value, (list, tuple)):
        out[prefix.upper()] = ",".join(str(v) for v in value)
    else:
        out[prefix.upper()] = str(value)


def dump_config(cfg: PipelineConfig) -> str:
    """Resolved configuration as sorted KEY=value lines, loadable by load_config"""
    flat: Dict[str, str] = {}
    _flatten(cfg.model_dump(mode='json'), "", flat)
    return "".join(f"{key}={flat[key]}\n" for key in sorted(flat))
