"""
Django settings for the msdiar project.

Only the pieces the pipeline uses are configured: the diarization app (for its
management commands), logging, and the default pipeline configuration.
"""

import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.environ.get('MSDIAR_SECRET_KEY', 'msdiar-batch-pipeline-no-web-surface')

DEBUG = False

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'diarization',
]

# The pipeline is file based; no database is used.
DATABASES = {}


# Internationalization
LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False


# Logging: diagnostics go to stderr, machine-readable output goes to files.
LOG_LEVEL = os.environ.get('MSDIAR_LOG_LEVEL', 'INFO').upper()

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'stderr': {
            'class': 'logging.StreamHandler',
            'stream': 'ext://sys.stderr',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'diarization': {
            'handlers': ['stderr'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
    },
}


# Environment variables with this prefix override pipeline config keys,
# e.g. MSDIAR_MSDD__THRESHOLD=0.6 or MSDIAR_SCALES__PRESET=meeting.
DIARIZATION_ENV_PREFIX = 'MSDIAR_'

# Scale presets (window lengths in seconds, coarsest first).
SCALE_PRESETS = {
    'telephonic': [1.5, 1.25, 1.0, 0.75, 0.5],
    'meeting': [3.0, 2.5, 2.0, 1.5, 1.0, 0.5],
}

# Default pipeline configuration; a run config file overrides any subset.
DIARIZATION = {
    'scales': {
        'preset': 'telephonic',
        'windows': None,
        'hops': None,
    },
    'clustering': {
        'r': 1.0,
        'max_speakers': 8,
        'max_p': 50,
        'kmeans_init': 10,
        'merge_residual': 0.5,
        'seed': 0,
    },
    'msdd': {
        'threshold': 0.7,
        'conv_channels': 16,
        'fc_hidden': 256,
        'lstm_hidden': 256,
        'lstm_layers': 2,
    },
    'training': {
        'learning_rate': 1e-3,
        'max_epochs': 30,
        'patience': 3,
        'batch_size': 32,
        'chunk_steps': 50,
        'profile_mode': 'oracle',
        'seed': 0,
    },
    'synth': {
        'num_sessions': 10,
        'num_speakers': 2,
        'dim': 192,
        'session_duration': 60.0,
        'overlap_fraction': 0.15,
        'base_noise_sigma': 0.05,
        'scale_noise_exponent': 1.0,
        'min_centroid_angle': 60.0,
        'seed': 7,
    },
    'jobs': 1,
}
