from pathlib import Path
import os
from dotenv import load_dotenv

# Load environment variables from .env file
env_path = Path(__file__).resolve().parents[2] / '.env'
load_dotenv(env_path)

BASE_DIR = Path(__file__).resolve().parents[2]

SECRET_KEY = os.environ.get("SECRET_KEY", "dev-secret-change-me")
DEBUG = os.environ.get("DEBUG", "0") in {"1", "true", "True"}

ALLOWED_HOSTS = []

INSTALLED_APPS = [
    "rest_framework",
    "laboratory.apps.LaboratoryConfig",
]

# The laboratory keeps no relational state; every artifact lands in the output directory.
DATABASES = {}

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

# DRF is used for parsing and serializer validation only
REST_FRAMEWORK = {
    "UNAUTHENTICATED_USER": None,
    "DEFAULT_PARSER_CLASSES": ["rest_framework.parsers.JSONParser"],
    "DEFAULT_RENDERER_CLASSES": ["rest_framework.renderers.JSONRenderer"],
}


def _env_float(name, default):
    return float(os.getenv(name, default))


def _env_int(name, default):
    return int(os.getenv(name, default))


# --- Numerical laboratory defaults ---
LAB = {
    "DELTA": _env_float("LAB_DELTA", "1e-2"),
    "EPS": _env_float("LAB_EPS", "1e-4"),
    "S_SMOOTHING_RADIUS": _env_float("LAB_S_SMOOTHING_RADIUS", "1e-3"),
    "INTEGRATOR_STEP": _env_float("LAB_INTEGRATOR_STEP", "1e-3"),
    "INTEGRATOR_ORDER": _env_int("LAB_INTEGRATOR_ORDER", "4"),
    "MULTISTART": _env_int("LAB_MULTISTART", "100"),
    "UNIQUENESS_SEEDS": _env_int("LAB_UNIQUENESS_SEEDS", "20"),
    "THREADS": _env_int("LAB_THREADS", "1"),
    "SEED": _env_int("LAB_SEED", "0"),
    "OUTPUT_DIR": os.getenv("LAB_OUTPUT_DIR", str(BASE_DIR / "lab_output")),
    "FLOAT_DIGITS": 17,
}

LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {process:d} {thread:d} {message}',
            'style': '{',
        },
        'simple': {
            'format': '{levelname} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
        'file': {
            'class': 'logging.FileHandler',
            'filename': os.getenv("LAB_LOG_FILE", str(BASE_DIR / "torus_lab.log")),
            'formatter': 'verbose',
            'delay': True,
        },
    },
    'loggers': {
        'django': {
            'handlers': ['console'],
            'level': 'WARNING',
            'propagate': False,
        },
        'laboratory': {
            'handlers': ['console', 'file'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
        'torus_lab': {
            'handlers': ['console', 'file'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
    },
    'root': {
        'handlers': ['console'],
        'level': 'WARNING',
    },
}
