"""
Configuration file for stepscore
Default values for every pipeline stage; runtime overrides come from a key=value
config file and STEPSCORE_ environment variables (see src/settings.py)
"""

import os
from pathlib import Path

# ==================== PROJECT PATHS ====================
BASE_DIR = Path(__file__).parent
DATA_DIR = BASE_DIR / "data"
OUTPUT_DIR = BASE_DIR / "output"
MODELS_DIR = OUTPUT_DIR / "models"

# Corpus layout (relative to a corpus directory)
CORPUS_AUDIO_SUBDIR = "audio"
CORPUS_SAD_REF = "ref.lab"
CORPUS_RTTM_REF = "ref.rttm"
CORPUS_TRANSCRIPTS = "ref.txt"
CORPUS_TRAIN_LIST = "train.list"
CORPUS_DEV_LIST = "dev.list"

# Model / artifact file names (relative to the models or output dir)
SAD_MODEL_FILE = "sad.sadm"
PLDA_MODEL_FILE = "plda.plda"
WHITEN_MODEL_FILE = "whiten.whtn"
TUNED_SAD_FILE = "sad_tuned.env"
TUNED_AHC_FILE = "ahc_tuned.env"

# ==================== ENVIRONMENT ====================
ENV_PREFIX = "STEPSCORE_"
LOG_LEVEL = os.getenv("STEPSCORE_LOG_LEVEL", "INFO")
LOG_FORMAT = os.getenv("STEPSCORE_LOG_FORMAT", "console")
DEFAULT_WORKERS = int(os.getenv("STEPSCORE_WORKERS", 4))
DEFAULT_SEED = 0

# ==================== EXIT CODES ====================
EXIT_CODES = {
    'ok': 0,
    'usage': 2,
    'data': 3,
    'numerical': 4
}

# ==================== FRONTEND ====================
PREEMPHASIS = 0.97
MEL_FILTERS_NARROWBAND = 23     # sample rates up to 8 kHz
MEL_FILTERS_WIDEBAND = 40       # anything above
ENERGY_FLOOR = 1e-10
DELTA_WINDOW = 2

FRONTEND_DEFAULTS = {
    'window_len': 0.025,
    'hop': 0.010,
    'num_ceps': 13,
    'include_deltas': False
}

# 23 MFCC for the embedding extractors
EMBEDDING_FRONTEND_DEFAULTS = {
    'window_len': 0.025,
    'hop': 0.010,
    'num_ceps': 23,
    'include_deltas': True
}

# ==================== SAD ====================
SAD_CONTEXT = 30

SAD_MODEL_SHAPES = {
    '2x256': [256, 256],
    '3x400': [400, 400, 400]
}

SAD_TRAIN_DEFAULTS = {
    'learning_rate': 0.05,
    'momentum': 0.9,
    'epochs': 10,
    'batch_size': 256
}

# Postprocessing tuned for DCF on development data
SAD_POST_DEFAULTS = {
    'f_thd': 0.02,
    's_min': 25,
    's_thd': 0.25,
    'gap_merge': 0
}

TUNING_GRID_DEFAULTS = {
    'f_thd': [0.02, 0.1, 0.3, 0.5, 0.7, 0.9],
    's_min': [1, 10, 25, 50],
    's_thd': [0.0, 0.25, 0.5, 0.75],
    'gap_merge': [0]
}

# ==================== METRICS ====================
DCF_WEIGHTS = (0.75, 0.25)          # (miss, false alarm)
DCF_INV_WEIGHTS = (0.25, 0.75)

METRICS_DEFAULTS = {
    'collar': 0.25,
    'frame': 0.01,
    'pooling': 'pooled'
}

# ==================== EMBEDDINGS ====================
CHUNKING_DEFAULTS = {
    'chunk_len': 2.0,
    'step': 1.0,
    'min_len': 0.25,
    'train_chunk_len': 3.0
}

EMBEDDING_DEFAULTS = {
    'toy_dim': 16,
    'fuse': False,
    'whiten_train_only': False
}

# Relative eigenvalue floor: floor = WHITEN_EIGEN_FLOOR * trace / dim
WHITEN_EIGEN_FLOOR = 1e-10

# ==================== DIARIZATION ====================
PLDA_MAX_ITERS = 50
PLDA_TOL = 1e-6
PLDA_COV_FLOOR = 1e-10

AHC_DEFAULTS = {
    'stop_threshold': 0.0,
    'pca_components': 4,
    'linkage': 'average',
    'scoring': 'plda'
}

VB_DEFAULTS = {
    'loop_prob': 0.99,
    'max_iters': 10,
    'acoustic_scale': 0.3,
    'min_occupancy': 0.01,
    'convergence_tol': 1e-4,
    'speaker_regularization': 11.0,
    'init_smoothing': 5.0,
    'update_priors': False,
    'reference_dim': 128
}

# acoustic_scale is stated for reference_dim-dimensional vectors; VB rescales it by
# reference_dim / dim (capped at 1) for the space it actually runs in. 0 disables.

# Extra recording-dependent PCA components for under-clustering
UC_EXTRA_COMPONENTS = 4

SD_VARIANTS = ['ahc', 'ahc_vb', 'ahc_uc_vb']

AHC_TUNING_GRID = {
    'stop_threshold': [-5.0, -2.0, 0.0, 2.0, 5.0],
    'pca_components': [2, 4, 8]
}

# ==================== SST SELECTION ====================
SST_DEFAULTS = {
    'min_dur': 2.0,
    'max_dur': 20.0,
    'min_conf': 0.0,
    'weight_sup': 1.0,
    'weight_unsup': 1.0
}

# ==================== SYNTHETIC CORPUS ====================
SYNTH_DEFAULTS = {
    'recordings': 20,
    'speakers_per_recording': 3,
    'speaker_pool': 12,
    'duration': 40.0,
    'sample_rate': 8000,
    'min_turn': 0.6,
    'max_turn': 4.0,
    'min_gap': 0.4,
    'max_gap': 2.0,
    'speech_level': 0.3,
    'noise_level': 0.01,
    'level_spread_db': 6.0,
    'fade': 0.05,
    'pause_prob': 0.5,
    'burst_prob': 0.5
}

# ==================== REPORTS ====================
# log10 duration histogram: 4 bins per decade from 10 ms to 100 s
HISTOGRAM_LOG10_RANGE = (-2.0, 2.0)
HISTOGRAM_BINS_PER_DECADE = 4
CSV_FLOAT_FORMAT = "%.4f"
SVG_HASHSALT = "stepscore"

COLORS = {
    'reference': '#2E5090',
    'hypothesis': '#4A90E2',
    'histogram': '#28A745'
}
